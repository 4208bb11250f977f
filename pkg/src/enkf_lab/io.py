"""CSV exports: comma separated, header row, 17 significant digits."""
import csv

import numpy as np


def fmt(value):
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.16e}"
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def vec_cols(prefix, d):
    return [f"{prefix}[{i}]" for i in range(d)]


def mat_cols(prefix, rows, cols):
    return [f"{prefix}[{i},{j}]" for i in range(rows) for j in range(cols)]


def path_tables(sample):
    """Header/rows for the states and observations of a :class:`PathSample`."""
    states, obs = sample.states, sample.observations
    steps = range(states.shape[0])
    s_tab = (["step"] + vec_cols("x", states.shape[1]),
             [[k, *map(float, states[k])] for k in steps])
    o_tab = (["step"] + vec_cols("y", obs.shape[1]),
             [[k, *map(float, obs[k])] for k in steps])
    return s_tab, o_tab


def kalman_table(params, traj):
    """Rows ``step, pred_mean, pred_cov, upd_mean, upd_cov, gain`` (row-major)."""
    d, d0 = params.d, params.d0
    header = (["step"] + vec_cols("pred_mean", d) + mat_cols("pred_cov", d, d)
              + vec_cols("upd_mean", d) + mat_cols("upd_cov", d, d) + mat_cols("gain", d, d0))
    rows = []
    for s in traj.states:
        row = [s.step, *map(float, s.pred_mean), *map(float, s.pred_cov.ravel())]
        if s.upd_cov is None:
            row += [""] * (d + d * d + d * d0)
        else:
            row += [*map(float, s.upd_mean), *map(float, s.upd_cov.ravel()),
                    *map(float, s.gain.ravel())]
        rows.append(row)
    return header, rows


def enkf_table(params, run, reference):
    """Rows ``step, backend, m, p, P`` with the exact ``P_n`` alongside.

    The mean columns are empty for the covariance-only backend.
    """
    d = params.d
    header = (["step", "backend"] + vec_cols("m", d) + mat_cols("p", d, d)
              + mat_cols("P", d, d))
    rows = []
    for k in range(run.pred_cov.shape[0]):
        mean = [""] * d if run.pred_mean is None else [*map(float, run.pred_mean[k])]
        rows.append([k, run.backend, *mean, *map(float, run.pred_cov[k].ravel()),
                     *map(float, reference[k].ravel())])
    return header, rows

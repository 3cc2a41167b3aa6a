"""CSV and JSON input/output.

CSV layout: a header row, observation columns ``z1..zm``, optional
heterogeneity columns ``sigma11..sigmamm`` (row-major Gaussian covariance) or
``lambda1..lambdam`` (Poisson exposure), and optional latent columns
``theta1..thetam``. Floats are written with 17 significant digits so that a
file read back reproduces the values bit for bit.
"""

import csv
import json
import re

import numpy as np

from .errors import ColumnMismatch, ParseError, RowCountMismatch
from .models import Dataset, GaussianHeteroscedastic, GaussianHomoscedastic, PoissonExposure

FLOAT_FORMAT = "{:.17g}"


def _indexed(header, prefix):
    cols = {}
    pat = re.compile(rf"^{prefix}(\d+)$")
    for pos, name in enumerate(header):
        hit = pat.match(name)
        if hit:
            cols[hit.group(1)] = pos
    return cols


def read_table(path):
    """Header and float matrix of a CSV file."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path} is empty", line=1) from None
        rows = []
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}:{line}: expected {len(header)} fields, got {len(rec)}", line=line)
            try:
                rows.append([float(c) for c in rec])
            except ValueError:
                raise ParseError(f"{path}:{line}: non-numeric field", line=line) from None
    values = np.array(rows, dtype=float).reshape(len(rows), len(header))
    if not np.isfinite(values).all():
        bad = int(np.flatnonzero(~np.isfinite(values).all(1))[0]) + 2
        raise ParseError(f"{path}:{bad}: non-finite value", line=bad)
    return header, values


def columns(header, values, prefix, m=None):
    """Stack the columns ``prefix1..prefixm`` (empty if none are present)."""
    found = _indexed(header, prefix)
    if not found:
        return None
    m = len(found) if m is None else m
    want = [str(k) for k in range(1, m + 1)]
    missing = [prefix + k for k in want if k not in found]
    if missing:
        raise ColumnMismatch(f"missing columns {missing}", missing=missing)
    return values[:, [found[k] for k in want]]


def read_dataset(path, model="gaussian", noise_cov=None):
    """Build a :class:`Dataset` from a CSV file.

    Parameters
    ----------
    model : {"gaussian", "gaussian-het", "poisson"}
        ``"gaussian"`` uses ``noise_cov`` unless per-row ``sigma`` columns are
        present, in which case the heteroscedastic model is used.
    noise_cov : float or (m, m) array_like, optional
        Known homoscedastic covariance.
    """
    header, values = read_table(path)
    z = columns(header, values, "z")
    if z is None:
        raise ColumnMismatch(f"{path} has no z1..zm columns")
    n, m = z.shape
    theta = columns(header, values, "theta", m) if _indexed(header, "theta") else None
    if model in ("gaussian", "gaussian-het"):
        sig = _sigma_columns(header, values, m)
        if sig is not None:
            lik = GaussianHeteroscedastic(sig)
        elif model == "gaussian-het":
            raise ColumnMismatch("heteroscedastic model needs sigma11..sigmamm columns")
        else:
            if noise_cov is None:
                raise ColumnMismatch("no sigma columns and no noise_cov given")
            cov = np.asarray(noise_cov, dtype=float)
            lik = GaussianHomoscedastic(cov * np.eye(m) if cov.ndim == 0 else cov)
    elif model == "poisson":
        lam = columns(header, values, "lambda", m) if _indexed(header, "lambda") else np.ones((n, m))
        lik = PoissonExposure(lam)
    else:
        raise ColumnMismatch(f"unknown model {model!r}")
    return Dataset(z, lik, theta)


def _sigma_columns(header, values, m):
    if not any(h.startswith("sigma") for h in header):
        return None
    pos = {h: i for i, h in enumerate(header)}
    names = [f"sigma{a}{b}" for a in range(1, m + 1) for b in range(1, m + 1)]
    missing = [c for c in names if c not in pos]
    if missing:
        raise ColumnMismatch(f"missing covariance columns {missing}", missing=missing)
    return values[:, [pos[c] for c in names]].reshape(-1, m, m)


def dataset_columns(data):
    """Header and matrix reproducing ``data`` in the CSV schema."""
    m = data.m
    header = [f"z{k}" for k in range(1, m + 1)]
    blocks = [data.z]
    model = data.model
    if isinstance(model, GaussianHeteroscedastic):
        header += [f"sigma{a}{b}" for a in range(1, m + 1) for b in range(1, m + 1)]
        blocks.append(model.noise_covs.reshape(data.n, -1))
    elif isinstance(model, PoissonExposure):
        header += [f"lambda{k}" for k in range(1, m + 1)]
        blocks.append(model.exposure)
    if data.latents is not None:
        header += [f"theta{k}" for k in range(1, m + 1)]
        blocks.append(data.latents)
    return header, np.hstack(blocks)


def write_table(path, header, values):
    values = np.atleast_2d(np.asarray(values, dtype=float))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in values:
            w.writerow([FLOAT_FORMAT.format(v) for v in row])


def write_records(path, records):
    """Write a list of flat dicts as CSV (union of keys, first-seen order)."""
    keys = []
    for rec in records:
        for k in rec:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for rec in records:
            w.writerow([_fmt(rec.get(k, "")) for k in keys])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return FLOAT_FORMAT.format(float(v))
    return v


def write_dataset(path, data):
    """Write observations, heterogeneity and latents in the CSV schema."""
    write_table(path, *dataset_columns(data))


def read_values(path, prefix, n=None):
    """Read ``prefix1..prefixm`` columns, checking the row count."""
    header, values = read_table(path)
    out = columns(header, values, prefix)
    if out is None:
        raise ColumnMismatch(f"{path} has no {prefix}1.. columns")
    if n is not None and out.shape[0] != n:
        raise RowCountMismatch(f"{path} has {out.shape[0]} rows, expected {n}", rows=out.shape[0], expected=n)
    return out


def dump_json(obj, path=None):
    """Deterministic JSON (sorted keys, full precision floats)."""
    text = json.dumps(obj, indent=1, sort_keys=True, default=_default) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"cannot serialise {type(o).__name__}")

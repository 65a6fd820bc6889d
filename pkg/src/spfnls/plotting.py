"""Matplotlib figures for the CLI report path (Agg backend, sealed PNGs)."""
from __future__ import annotations

import io
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path, config):
    from .cli_io import seal_png
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_META)
    plt.close(fig)
    with open(path, "wb") as fh:
        fh.write(seal_png(buf.getvalue(), config))
    return path


def plot_trajectory(path, traj, config):
    fig, ax = plt.subplots(figsize=(6, 4))
    for p in range(traj.n_paths):
        ax.plot(traj.times, traj.l2[:, p], lw=0.8, color="C0", alpha=max(0.1, 1.0 / traj.n_paths ** 0.5))
    ax.set_xlabel("t")
    ax.set_ylabel("||u(t)||")
    fig.tight_layout()
    return _save(fig, path, config)


def plot_spectrum(path, pack, config):
    lam = pack.spectrum
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(10, 4))
    a1.plot(lam.real, lam.imag, ".", ms=3)
    a1.plot([pack.zero_eigenvalue.real], [pack.zero_eigenvalue.imag], "r*", ms=10)
    a1.axvline(-pack.gap_b, color="k", lw=0.6, ls="--")
    a1.set_xlim(min(lam.real.min() * 1.1, -2 * pack.gap_b), pack.gap_b * 0.5)
    a1.set_xlabel("Re lambda")
    a1.set_ylabel("Im lambda")
    if pack.decay_ready:
        fit = pack.decay_fit
        a2.plot(fit.t, fit.norms)
        a2.axhline(fit.M, color="k", lw=0.6, ls="--")
        a2.set_xlabel("t")
        a2.set_ylabel("||P(t) Pi|| e^{at}")
    fig.tight_layout()
    return _save(fig, path, config)


def plot_expansion(path, diag, config):
    fig, ax = plt.subplots(figsize=(6, 4))
    for k in ("v1", "v2", "w1", "w2", "zp", "z"):
        ax.semilogy(diag.times[1:], np.median(getattr(diag, k)[1:], axis=1), label=k)
    ax.set_xlabel("t")
    ax.set_ylabel("median norm")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path, config)


def plot_report(outdir, report, config):
    fig, ax = plt.subplots(figsize=(6, 4))
    name = report.name
    if name == "diffusion":
        header, tab = report.tables["variance"]
        for j in range(1, tab.shape[1]):
            ax.plot(tab[:, 0], tab[:, j], label=header[j])
        ax.set_xlabel("t")
        ax.set_ylabel("Var")
    elif name == "order":
        for key, (header, tab) in report.tables.items():
            ax.loglog(tab[:, 0], tab[:, 1], "o-", label=f"z {key}")
            ax.loglog(tab[:, 0], tab[:, 2], "s-", label=f"z' {key}")
        ax.set_xlabel("sigma")
        ax.set_ylabel("median sup norm")
    elif name == "fluctuation":
        header, tab = report.tables["moments"]
        for j in range(1, tab.shape[1]):
            ax.loglog(tab[1:, 0], tab[1:, j], label=header[j])
        ax.set_xlabel("t")
    elif name == "escape":
        header, tab = report.tables["escape"]
        for eps in np.unique(tab[:, 1]):
            r = tab[(tab[:, 1] == eps) & (tab[:, 0] > 0)]
            if not len(r):
                continue
            x = eps ** 2 / r[:, 0] ** 2
            p = np.where(r[:, 4] > 0, r[:, 4], np.nan)
            ax.errorbar(x, p, yerr=[p - r[:, 5], r[:, 6] - p], fmt="o-", label=f"eps={eps:g}")
        ax.set_yscale("log")
        ax.set_xlabel("eps^2 / sigma^2")
        ax.set_ylabel("escape frequency")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return [_save(fig, os.path.join(outdir, f"{name}.png"), config)]

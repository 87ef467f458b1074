"""Figure rendering for the command-line report path.

Each experiment writes a PNG next to its delimited output.  The Agg
backend is forced so rendering works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def trajectory_figure(times, counts, path):
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.step(times, counts, where="post", lw=0.8)
    ax.set_xlabel("time")
    ax.set_ylabel("particle count")
    ax.set_title("particle count over time")
    _save(fig, path)


def occupation_figure(edges, density, oracle, path):
    centers = 0.5 * (np.asarray(edges[:-1]) + np.asarray(edges[1:]))
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.stairs(density, edges, label="estimated occupation density")
    if oracle is not None:
        ax.plot(centers, oracle, "k--", lw=1.2, label="analytic density")
    ax.set_xlabel("z")
    ax.set_ylabel("density")
    ax.legend()
    _save(fig, path)


def moments_figure(powers, estimates, ses, analytic, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    x = np.asarray(powers, dtype=float)
    ax.errorbar(x, estimates, yerr=3.0 * np.asarray(ses), fmt="o",
                capsize=4, label="regenerative estimate (3 SE)")
    if analytic is not None:
        ax.plot(x, analytic, "k_", ms=18, label="analytic")
    ax.set_xticks(x)
    ax.set_xlabel("moment order")
    ax.set_ylabel("invariant count moment")
    ax.legend()
    _save(fig, path)


def reconstruct_figure(rows, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    deltas = [r["delta"] for r in rows]
    for key, label in [("prop_identifiable", "identifiable"),
                       ("prop_wrong", "identifiable but wrong"),
                       ("prop_nonvoid_not_ci", "nonvoid, not CI")]:
        ax.plot(deltas, [r[key] for r in rows], "o-", label=label)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("observation step")
    ax.set_ylabel("proportion of pairs")
    ax.legend()
    _save(fig, path)


def scheme_figure(xs, zs, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(xs, np.asarray(zs) ** 2, s=8)
    ax.set_xlabel("design point X")
    ax.set_ylabel("squared response Z^2")
    ax.set_title("regression scheme responses")
    _save(fig, path)


def estimate_figure(xs, z2, a, estimate, true_value, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.scatter(xs, z2, s=8, alpha=0.6, label="cell responses Z^2")
    ax.axvline(a, color="gray", lw=0.8)
    ax.plot([a], [estimate], "r*", ms=14, label="kernel estimate")
    if true_value is not None:
        ax.plot([a], [true_value], "k_", ms=18, label="true value")
    ax.set_xlabel("x")
    ax.legend()
    _save(fig, path)


def sweep_figure(rows, path):
    fig, ax = plt.subplots(figsize=(6, 4))
    deltas = [r["delta"] for r in rows]
    ax.plot(deltas, [r["rescaled_mse"] for r in rows], "o-",
            label="rescaled risk")
    ax.plot(deltas, [r["mse"] for r in rows], "s--", label="MSE")
    ax.set_xscale("log")
    ax.set_xlabel("observation step")
    ax.legend()
    _save(fig, path)


def verify_figure(names, z_scores, path):
    fig, ax = plt.subplots(figsize=(7, 4))
    y = np.arange(len(names))
    ax.barh(y, z_scores)
    ax.axvline(3.0, color="r", ls="--", lw=0.8)
    ax.axvline(-3.0, color="r", ls="--", lw=0.8)
    ax.set_yticks(y, names)
    ax.set_xlabel("z-score vs oracle")
    _save(fig, path)

"""Report figures written next to the CSV/JSON outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

rc_params = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.frameon": False,
    "legend.fontsize": 8,
}


def _normal_rgb(normals, mask):
    rgb = np.clip((np.asarray(normals) + 1.0) / 2.0, 0, 1)
    rgb[~mask] = 1.0
    return rgb


def plot_normals(path, normals, mask, gt=None, error_map=None):
    """Estimated normal map, and ground truth plus angular error when given."""
    panels = 1 + (gt is not None) + (error_map is not None)
    with plt.rc_context(rc_params):
        fig, axes = plt.subplots(1, panels, figsize=(3.2 * panels, 3.2), squeeze=False)
        axes = axes[0]
        axes[0].imshow(_normal_rgb(normals, mask))
        axes[0].set_title("estimated normals")
        i = 1
        if gt is not None:
            axes[i].imshow(_normal_rgb(gt, mask))
            axes[i].set_title("ground truth")
            i += 1
        if error_map is not None:
            err = np.where(mask, error_map, np.nan)
            im = axes[i].imshow(err, cmap="magma", vmin=0, vmax=max(10.0, float(np.nanmax(err))))
            axes[i].set_title(f"angular error (mean {np.nanmean(err):.2f} deg)")
            fig.colorbar(im, ax=axes[i], fraction=0.046, pad=0.04)
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_training(path, history):
    """Loss, PSB level and (when available) normal/light errors per epoch."""
    ep = np.array([h.epoch for h in history])
    with plt.rc_context(rc_params):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3))
        ax0.semilogy(ep, [h.loss for h in history], color="k", lw=1)
        ax0.set_xlabel("epoch")
        ax0.set_ylabel("photometric loss")
        twin = ax0.twinx()
        twin.plot(ep, [h.alpha for h in history], color="tab:orange", lw=1)
        twin.set_ylabel("PSB level", color="tab:orange")
        if history and history[0].normal_mae is not None:
            ax1.plot(ep, [h.normal_mae for h in history], label="normal MAE")
        if history and history[0].dir_mae is not None:
            ax1.plot(ep, [h.dir_mae for h in history], label="light direction MAE")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("degrees")
        if ax1.lines:
            ax1.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_lights(path, est_dirs, gt_dirs=None):
    """Light directions projected on the image plane."""
    with plt.rc_context(rc_params):
        fig, ax = plt.subplots(figsize=(3.6, 3.6))
        ax.add_patch(plt.Circle((0, 0), 1, fill=False, color="0.7"))
        if gt_dirs is not None:
            ax.scatter(gt_dirs[:, 0], gt_dirs[:, 1], marker="o", facecolors="none", edgecolors="k", label="ground truth")
            for a, b in zip(est_dirs, gt_dirs):
                ax.plot([a[0], b[0]], [a[1], b[1]], color="0.6", lw=0.6)
        ax.scatter(est_dirs[:, 0], est_dirs[:, 1], marker="x", color="tab:red", label="estimate")
        ax.set_xlim(-1.05, 1.05)
        ax.set_ylim(-1.05, 1.05)
        ax.set_aspect("equal")
        ax.set_xlabel("l_x")
        ax.set_ylabel("l_y")
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_gbr_surface(path, result):
    """Loss over (mu, nu) at the best lambda and over (mu, lambda) at the best nu."""
    i, j, k = result.argmin
    with plt.rc_context(rc_params):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.4))
        ext0 = [result.nu[0], result.nu[-1], result.mu[0], result.mu[-1]]
        im0 = ax0.imshow(result.loss[:, :, k], origin="lower", extent=ext0, aspect="auto", cmap="viridis")
        ax0.set_xlabel("nu")
        ax0.set_ylabel("mu")
        ax0.set_title(f"lambda = {result.lam[k]:.3g}")
        fig.colorbar(im0, ax=ax0)
        ext1 = [0, len(result.lam) - 1, result.mu[0], result.mu[-1]]
        im1 = ax1.imshow(result.loss[:, j, :], origin="lower", extent=ext1, aspect="auto", cmap="viridis")
        ax1.set_xticks(range(len(result.lam)))
        ax1.set_xticklabels([f"{x:.2g}" for x in result.lam], rotation=45)
        ax1.set_xlabel("lambda")
        ax1.set_ylabel("mu")
        ax1.set_title(f"nu = {result.nu[j]:.3g}")
        fig.colorbar(im1, ax=ax1)
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)

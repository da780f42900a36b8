"""Matplotlib figures written next to the CSV/JSON outputs of the CLI."""
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _figure(width=4.5, height=3.0):
    with plt.rc_context(STYLE):
        return plt.subplots(figsize=(width, height))


def _save(fig, path):
    with plt.rc_context(STYLE):
        fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_training_curves(history, path):
    epochs = [r["epoch"] for r in history]
    fig, ax = _figure()
    ax.plot(epochs, [r["train_loss"] for r in history], "o-", color="tab:blue", label="train loss")
    ax.plot(epochs, [r.get("val_loss", float("nan")) for r in history], "o:", color="tab:cyan", label="val loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [r["val_map"] for r in history], "s--", color="tab:red", label="val mAP")
    ax2.set_ylabel("mAP")
    ax2.set_ylim(0, 1.02)
    lines = ax.get_lines() + ax2.get_lines()
    ax.legend(lines, [ln.get_label() for ln in lines], loc="center right", frameon=False)
    _save(fig, path)


def plot_slices(reports, path, title="mAP by slice"):
    """Bar chart of per-slice values; the global value is drawn as a dashed line."""
    overall = [r for r in reports if r.slice == "all"]
    slices = [r for r in reports if r.slice != "all"]
    fig, ax = _figure(max(3.0, 0.9 * len(slices) + 1.5))
    if slices:
        ax.bar(range(len(slices)), [r.value for r in slices], color="tab:blue", alpha=0.8)
        ax.set_xticks(range(len(slices)))
        ax.set_xticklabels([r.slice for r in slices], rotation=30, ha="right")
    if overall:
        ax.axhline(overall[0].value, color="k", ls="--", lw=1, label=f"all = {overall[0].value:.3f}")
        ax.legend(frameon=False, loc="lower right")
    ax.set_ylim(0, 1.02)
    ax.set_ylabel(reports[0].metric if reports else "value")
    ax.set_title(title)
    _save(fig, path)


def plot_ablation(rows, path):
    """``rows``: list of (label, value) pairs, e.g. modality subsets and their mAP."""
    fig, ax = _figure(max(3.0, 0.7 * len(rows) + 1.5))
    ax.bar(range(len(rows)), [v for _, v in rows], color="tab:green", alpha=0.8)
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels([k for k, _ in rows], rotation=30, ha="right")
    ax.set_ylim(0, 1.02)
    ax.set_ylabel("mAP")
    _save(fig, path)

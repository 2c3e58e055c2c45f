"""Report emission: machine-readable JSON, aligned text table, CSV, figures."""

from __future__ import annotations

import csv
import json
import os

from .metrics import MetricsReport


def format_table(report: MetricsReport) -> str:
    t25, t50 = report.thresholds
    lines = []
    lines.append("referrals: " + "  ".join(f"{s} {report.counts[s]}" for s in ("unique", "multiple", "overall")))
    lines.append("")
    header1 = f"{'':8s}" + "".join(f"{s:^20s}" for s in ("Unique", "Multiple", "Overall"))
    header2 = f"{'':8s}" + f"{'Acc@25':>9s}{'Acc@50':>9s}  " * 3
    lines.append(header1)
    lines.append(header2.rstrip())
    for label, acc in (("box", report.box_acc), ("mask", report.mask_acc)):
        row = f"{label:8s}"
        for subset in ("unique", "multiple", "overall"):
            row += f"{acc[subset][t25]:>9.4f}{acc[subset][t50]:>9.4f}  "
        lines.append(row.rstrip())
    return "\n".join(lines) + "\n"


def write_report(out_dir: str, report: MetricsReport, figures: bool = True):
    """Write report.json / report.txt / referrals.csv and accuracy figures."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_table(report))
    t25, t50 = report.thresholds
    with open(os.path.join(out_dir, "referrals.csv"), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "referral", "kind", "subset", "box_iou", "mask_iou",
                         "degenerate", "box_hit25", "box_hit50", "mask_hit25", "mask_hit50"])
        for r in report.records:
            writer.writerow([r.scene, r.referral, r.kind, r.subset,
                             f"{r.box_iou:.6f}", f"{r.mask_iou:.6f}", int(r.degenerate),
                             int(r.box_hits[t25]), int(r.box_hits[t50]),
                             int(r.mask_hits[t25]), int(r.mask_hits[t50])])
    if figures:
        _write_figures(out_dir, report)


def _write_figures(out_dir: str, report: MetricsReport):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    fig_dir = os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    t25, t50 = report.thresholds

    subsets = ("unique", "multiple", "overall")
    x = np.arange(len(subsets))
    width = 0.2
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.bar(x - 1.5 * width, [report.box_acc[s][t25] for s in subsets], width, label="box Acc@25")
    ax.bar(x - 0.5 * width, [report.box_acc[s][t50] for s in subsets], width, label="box Acc@50")
    ax.bar(x + 0.5 * width, [report.mask_acc[s][t25] for s in subsets], width, label="mask Acc@25")
    ax.bar(x + 1.5 * width, [report.mask_acc[s][t50] for s in subsets], width, label="mask Acc@50")
    ax.set_xticks(x)
    ax.set_xticklabels(f"{s}\n(n={report.counts[s]})" for s in subsets)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("accuracy")
    ax.set_title("grounding accuracy by subset")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(os.path.join(fig_dir, "accuracy.png"), dpi=110)
    plt.close(fig)

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.6), sharey=True)
    for ax, (label, values) in zip(axes, (
            ("box IoU", [r.box_iou for r in report.records]),
            ("mask IoU", [r.mask_iou for r in report.records]))):
        ax.hist(values, bins=np.linspace(0, 1, 21), edgecolor="black", linewidth=0.4)
        for t in report.thresholds:
            ax.axvline(t, color="crimson", linestyle="--", linewidth=0.8)
        ax.set_xlabel(label)
    axes[0].set_ylabel("referrals")
    fig.suptitle("per-referral IoU distribution")
    fig.tight_layout()
    fig.savefig(os.path.join(fig_dir, "iou_histogram.png"), dpi=110)
    plt.close(fig)

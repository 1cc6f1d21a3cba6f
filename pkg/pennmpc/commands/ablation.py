"""`penn-mpc ablate-history`: the same training protocol repeated for every history length in a range."""

from __future__ import annotations

import logging

from pennmpc.commands.common import load_split, prepare_output, require_data_dir, write_csv
from pennmpc.commands.train import fit
from pennmpc.errors import ConfigError
from pennmpc.models.schemas import AblationReport, AblationRow, ExperimentConfig

logger = logging.getLogger(__name__)


def format_table(report: AblationReport) -> str:
    best = report.best_H
    header = f"{'H':>4}  {'Total':>10}  {'v_x [m/s]':>10}  {'v_y [m/s]':>10}  {'r [rad/s]':>10}"
    lines = [header, "-" * len(header)]
    for row in report.rows:
        mark = " *" if row.H == best else ""
        lines.append(
            f"{row.H:>4}  {row.rmse_total:>10.6f}  {row.rmse_vx:>10.6f}  {row.rmse_vy:>10.6f}  {row.rmse_r:>10.6f}{mark}"
        )
    lines.append("* lowest pooled RMSE")
    return "\n".join(lines)


def cmd_ablate_history(cfg: ExperimentConfig, h_min: int = 1, h_max: int = 10) -> AblationReport:
    if not 1 <= h_min <= h_max:
        raise ConfigError(f"need 1 <= h_min <= h_max, got h_min={h_min}, h_max={h_max}")
    out = prepare_output(cfg, "ablate-history")
    data_dir = require_data_dir(cfg)

    rows = []
    for H in range(h_min, h_max + 1):
        train_set, test_set, manifest = load_split(data_dir, H, cfg)
        _, report = fit(cfg, H, train_set, test_set, manifest.dt)
        logger.info("H=%d: pooled RMSE %.6f", H, report.rmse_total)
        rows.append(
            AblationRow(H=H, rmse_total=report.rmse_total, rmse_vx=report.rmse_vx, rmse_vy=report.rmse_vy, rmse_r=report.rmse_r)
        )

    report = AblationReport(rows=rows)
    best = report.best_H
    report = AblationReport(rows=[r.model_copy(update={"best": r.H == best}) for r in rows])
    write_csv(
        out / "ablation.csv",
        ("H", "rmse_total", "rmse_vx", "rmse_vy", "rmse_r", "best"),
        ((r.H, r.rmse_total, r.rmse_vx, r.rmse_vy, r.rmse_r, r.best) for r in report.rows),
    )
    table = format_table(report)
    (out / "ablation.txt").write_text(table + "\n")
    logger.info("History ablation:\n%s", table)
    return report

"""
Formatting - pandas renderings of FLOPs reports for the CLI
"""

from typing import Literal

import pandas as pd

from tools.cost_tools import FlopsReport

TableFormat = Literal["table", "csv"]


def flops_frame(report: FlopsReport) -> pd.DataFrame:
    """
    One row per stage, then one row per mode total.

    Columns: section ("stage" / "conditioning" / "total"), name, flops, gflops.
    """
    rows = [("stage", name, value) for name, value in report.stages().items()]
    rows.append(("conditioning", "timestep+class", report.conditioning))
    rows.extend(("total", name, value) for name, value in report.totals().items())
    frame = pd.DataFrame(rows, columns=["section", "name", "flops"])
    frame["gflops"] = frame["flops"] / 1e9
    return frame


def render_flops(report: FlopsReport, fmt: TableFormat = "table") -> str:
    frame = flops_frame(report)
    if fmt == "csv":
        return frame.to_csv(index=False)
    title = (
        f"mode={report.mode} r={report.drop_ratio:g} tokens={report.tokens} "
        f"middle tokens={report.sparse_tokens}"
    )
    return title + "\n" + frame.to_string(index=False, formatters={"gflops": "{:.4f}".format})

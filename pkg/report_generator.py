"""
报告生成模块
把 RunReport 和结果表格写成 JSON / CSV / 对齐文本 / Markdown / HTML / KM SVG
"""

import json
import logging
import re
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import markdown
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from config import TOOL_STAMP  # noqa: E402
from errors import OutputError, SchemaError  # noqa: E402
from models import CellStat, ResultTable, RunReport, TrainingLog  # noqa: E402
from survmetrics import km_frame  # noqa: E402


logger = logging.getLogger(__name__)

REPORT_FILE = "run_report.json"
FLOAT_FORMAT = "%.17g"

plt.rcParams["svg.hashsalt"] = "survdg"


def slugify(text: str) -> str:
    slug = re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_").lower()
    return slug or "run"


def table_frames(table: ResultTable):
    """(宽表: 格式化的 mean ± std, 长表: 每格一行的数值)"""
    wide = pd.DataFrame(
        [[_cell_text(table.cell(r, c)) for c in table.column_labels] for r in table.row_labels],
        index=pd.Index(table.row_labels, name=table.row_header),
        columns=table.column_labels,
    )
    long = pd.DataFrame(
        [
            {
                table.row_header: r,
                "metric": c,
                "mean": table.cell(r, c).mean,
                "std": table.cell(r, c).std,
                "n_seeds": table.cell(r, c).n_seeds,
                "n_missing": table.cell(r, c).n_missing,
            }
            for r in table.row_labels
            for c in table.column_labels
        ]
    )
    return wide, long


def _cell_text(cell: CellStat) -> str:
    if cell.mean is None:
        return "missing"
    return f"{cell.format()} (n={cell.n_seeds})"


def table_to_dict(table: ResultTable) -> Dict[str, Any]:
    return {
        "title": table.title,
        "row_header": table.row_header,
        "row_labels": list(table.row_labels),
        "column_labels": list(table.column_labels),
        "cells": [
            {"row": r, "column": c, **vars(table.cell(r, c))} for r in table.row_labels for c in table.column_labels
        ],
    }


def table_from_dict(data: Dict[str, Any]) -> ResultTable:
    table = ResultTable(
        title=data["title"],
        row_header=data["row_header"],
        row_labels=list(data["row_labels"]),
        column_labels=list(data["column_labels"]),
    )
    for cell in data["cells"]:
        table.cells[(cell["row"], cell["column"])] = CellStat(
            mean=cell["mean"], std=cell["std"], n_seeds=cell["n_seeds"], n_missing=cell["n_missing"]
        )
    return table


def loss_frame(report: RunReport) -> pd.DataFrame:
    rows = [
        {"label": report.label, "seed": seed, **entry.to_dict()}
        for seed, entries in sorted(report.loss_curves.items())
        for entry in entries
    ]
    return pd.DataFrame(rows, columns=["label", "seed", "epoch", "clean_nll", "sdir_nll", "kl", "total", "steps"])


def cindex_frame(report: RunReport) -> pd.DataFrame:
    rows = []
    for k, seed in enumerate(report.seeds):
        rows.append({"label": report.label, "seed": seed, "domain": report.source_domain, "role": "source",
                     "c_index": report.source_cindex[k]})
        for d in report.target_domains:
            rows.append({"label": report.label, "seed": seed, "domain": d, "role": "target",
                         "c_index": report.target_cindex[d][k]})
        rows.append({"label": report.label, "seed": seed, "domain": "+".join(report.target_domains),
                     "role": "pooled", "c_index": report.pooled_cindex[k]})
    return pd.DataFrame(rows, columns=["label", "seed", "domain", "role", "c_index"])


class ReportGenerator:
    def __init__(self, output_dir: str = "results", config_hash: str = "", language: str = "zh"):
        self.output_dir = Path(output_dir)
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OutputError(f"cannot create output directory {self.output_dir}: {e}") from e
        self.config_hash = config_hash
        self.language = language
        self.stamp = f"{TOOL_STAMP} config={config_hash}"
        self._init_i18n()

    def _init_i18n(self):
        """初始化多语言文本"""
        self.texts = {
            "zh": {
                "report_title": "单源多模态生存泛化实验报告",
                "config": "配置哈希",
                "results": "C-index 结果",
                "domain": "域",
                "role": "角色",
                "loss": "各项损失（每个 epoch 跨种子平均）",
                "tables": "实验表格",
                "source": "源域",
                "target": "目标域",
                "pooled": "合并目标域",
            },
            "en": {
                "report_title": "Single-source multimodal survival generalization report",
                "config": "Config hash",
                "results": "C-index results",
                "domain": "Domain",
                "role": "Role",
                "loss": "Per-term loss (mean over seeds, per epoch)",
                "tables": "Result tables",
                "source": "source",
                "target": "target",
                "pooled": "pooled targets",
            },
        }

    def t(self, key: str) -> str:
        """获取当前语言的文本"""
        return self.texts.get(self.language, self.texts["zh"]).get(key, key)

    def generate_reports(self, reports: Sequence[RunReport], tables: Sequence[ResultTable] = ()) -> List[Path]:
        """生成所有报告文件，返回写出的路径"""
        if not reports and not tables:
            raise OutputError("nothing to report: need at least one run report or table")
        print("📊 生成报告...")
        written = [self._write_json(reports, tables)]
        for report in reports:
            written += self._write_report_files(report)
        for table in tables:
            written += self._write_table(table)
        written += self._write_summary(reports, tables)
        print(f"   ✅ 报告已生成到: {self.output_dir}")
        return written

    # ---------- 文件写出 ----------

    def _write_text(self, name: str, text: str) -> Path:
        path = self.output_dir / name
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="") as f:
                f.write(text)
        except OSError as e:
            raise OutputError(f"cannot write {path}: {e}") from e
        return path

    def _write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        body = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        return self._write_text(name, f"# {self.stamp}\n{body}")

    def _write_json(self, reports: Sequence[RunReport], tables: Sequence[ResultTable]) -> Path:
        payload = {
            "stamp": TOOL_STAMP,
            "config_hash": self.config_hash,
            "reports": [r.to_dict() for r in reports],
            "tables": [table_to_dict(t) for t in tables],
        }
        path = self._write_text(REPORT_FILE, json.dumps(payload, indent=1, sort_keys=True, ensure_ascii=False) + "\n")
        print(f"   📄 JSON报告: {path}")
        return path

    def _write_report_files(self, report: RunReport) -> List[Path]:
        slug = slugify(report.label)
        written = [
            self._write_csv(f"{slug}_cindex.csv", cindex_frame(report)),
            self._write_csv(f"{slug}_loss.csv", loss_frame(report)),
        ]
        first_seed = min(report.evaluations) if report.evaluations else None
        for seed, evaluations in sorted(report.evaluations.items()):
            for domain_id, ev in sorted(evaluations.items()):
                curves = {"low": ev.km_low, "high": ev.km_high}
                frame = km_frame(curves)
                frame.insert(0, "domain", domain_id)
                frame.insert(0, "seed", seed)
                written.append(self._write_csv(f"km/{slug}_seed{seed}_{slugify(domain_id)}.csv", frame))
                if seed == first_seed:
                    written.append(self._write_km_svg(f"km/{slug}_{slugify(domain_id)}.svg", ev, seed))
        return written

    def write_training_log(self, log: TrainingLog) -> Path:
        """单次训练的逐 epoch 损失"""
        frame = pd.DataFrame([e.to_dict() for e in log.epochs])
        frame.insert(0, "seed", log.seed)
        path = self._write_csv(f"training_log_seed{log.seed}.csv", frame)
        print(f"   📄 训练日志: {path}")
        return path

    def _write_km_svg(self, name: str, evaluation, seed: int) -> Path:
        """低/高风险组的 KM 阶梯图"""
        path = self.output_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for group, curve, color in (("low risk", evaluation.km_low, "tab:blue"), ("high risk", evaluation.km_high, "tab:red")):
            ax.step(np.r_[0.0, curve.times], np.r_[1.0, curve.survival], where="post", color=color, label=group)
        c = evaluation.c_index
        ax.set_title(f"{evaluation.domain_id} seed {seed} C-index {'missing' if c is None else f'{c:.3f}'}")
        ax.set_xlabel("time")
        ax.set_ylabel("survival")
        ax.set_ylim(-0.02, 1.02)
        ax.legend(loc="upper right")
        try:
            fig.savefig(path, format="svg", metadata={"Date": None, "Title": self.stamp})
        except OSError as e:
            raise OutputError(f"cannot write {path}: {e}") from e
        finally:
            plt.close(fig)
        return path

    def _write_table(self, table: ResultTable) -> List[Path]:
        wide, long = table_frames(table)
        slug = slugify(table.title)
        text = f"{table.title}\n{self.stamp}\n\n{wide.to_string()}\n"
        paths = [self._write_csv(f"{slug}.csv", long), self._write_text(f"{slug}.txt", text)]
        print(f"   📄 表格: {paths[1]}")
        return paths

    def _write_summary(self, reports: Sequence[RunReport], tables: Sequence[ResultTable]) -> List[Path]:
        md = self._summary_markdown(reports, tables)
        html_body = markdown.markdown(md, extensions=["tables"])
        html = (
            "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n"
            f"<title>{self.t('report_title')}</title>\n</head>\n<body>\n{html_body}\n</body>\n</html>\n"
        )
        return [self._write_text("summary.md", md), self._write_text("summary.html", html)]

    # ---------- Markdown ----------

    def _summary_markdown(self, reports: Sequence[RunReport], tables: Sequence[ResultTable]) -> str:
        lines = [f"# 📊 {self.t('report_title')}", "", f"`{self.stamp}`", ""]
        for report in reports:
            lines += [f"## {report.label}", "", f"**{self.t('config')}**: `{report.config_hash}`", ""]
            lines += [f"### {self.t('results')}", ""]
            rows = [[report.source_domain, self.t("source"), CellStat.from_values(report.source_cindex).format()]]
            rows += [[d, self.t("target"), report.target_stat(d).format()] for d in report.target_domains]
            rows.append(["+".join(report.target_domains), self.t("pooled"), CellStat.from_values(report.pooled_cindex).format()])
            lines += _markdown_table([self.t("domain"), self.t("role"), "C-index"], rows)
            lines += ["", f"### {self.t('loss')}", ""]
            losses = loss_frame(report)
            if not losses.empty:
                per_epoch = losses.groupby("epoch")[["clean_nll", "sdir_nll", "kl", "total"]].mean()
                lines += _markdown_table(
                    ["epoch", "clean_nll", "sdir_nll", "kl", "total"],
                    [[str(epoch)] + [f"{v:.4f}" for v in row] for epoch, row in per_epoch.iterrows()],
                )
            lines.append("")
        if tables:
            lines += [f"## {self.t('tables')}", ""]
            for table in tables:
                wide, _ = table_frames(table)
                lines += [f"### {table.title}", ""]
                lines += _markdown_table(
                    [table.row_header] + table.column_labels,
                    [[r] + list(wide.loc[r]) for r in table.row_labels],
                )
                lines.append("")
        return "\n".join(lines) + "\n"


def _markdown_table(header: List[str], rows: List[List[str]]) -> List[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(v) for v in row) + " |" for row in rows]
    return lines


def emit_report(
    reports: Sequence[RunReport],
    output_dir: str,
    tables: Sequence[ResultTable] = (),
    config_hash: Optional[str] = None,
    language: str = "zh",
) -> List[Path]:
    """生成报告的便捷函数"""
    if config_hash is None:
        config_hash = reports[0].config_hash if reports else ""
    generator = ReportGenerator(output_dir, config_hash, language)
    return generator.generate_reports(reports, tables)


def load_report_bundle(path):
    """读取 run_report.json，返回 (reports, tables, config_hash)"""
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_FILE
    if not path.exists():
        raise SchemaError(path, "file", "missing")
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise SchemaError(path, "json", str(e)) from e
    reports = [RunReport.from_dict(r) for r in payload.get("reports", [])]
    tables = [table_from_dict(t) for t in payload.get("tables", [])]
    return reports, tables, payload.get("config_hash", "")

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd
from jinja2 import Environment, FileSystemLoader

from core.utils.logging import error, success, warning

REPORT_FILE = "report.json"
TEMPLATE_DIR = Path(__file__).parent / "templates"

CSV_COLUMNS = [
    "run_id", "arch", "n_students", "k_active", "partition_scheme", "alpha", "lambda", "T", "seed", "split",
    "accuracy", "sem", "ce_loss", "kd_loss", "sim_loss", "param_count", "mac_ops", "ac_ops", "input_layer_macs",
    "mean_firing_rate",
]
INTEGER_COLUMNS = {"n_students", "k_active", "T", "seed", "param_count", "mac_ops", "ac_ops", "input_layer_macs"}
TEXT_COLUMNS = {"run_id", "arch", "partition_scheme", "split"}


def make_run_id(command: str, seed: int, config_text: str) -> str:
    digest = hashlib.sha256(config_text.encode("utf-8")).hexdigest()[:10]
    return f"{command}-s{seed}-{digest}"


@dataclass
class RunReport:
    """Everything one command produced, written as `report.json` in its run directory.

    `results` holds one entry per evaluated cell; each entry may override the
    run-level summary fields (`arch`, `k_active`, ...) for its CSV row.
    """
    run_id: str
    command: str
    seed: int
    config_text: str
    arch: str = ""
    n_students: int = 1
    k_active: int = 1
    partition_scheme: str = "none"
    alpha: float = 0.0
    lambda_: float = 0.0
    timesteps: int = 1
    param_count: int = 0
    epochs: List[dict] = field(default_factory=list)
    results: List[dict] = field(default_factory=list)
    ledger_rows: List[dict] = field(default_factory=list)
    plan: Optional[dict] = None
    artifacts: Dict[str, str] = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    created_at: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        if not isinstance(data, dict):
            raise ValueError("report is not a JSON object")
        missing = [k for k in ("run_id", "command", "seed", "config_text") if k not in data]
        if missing:
            raise ValueError(f"missing fields: {', '.join(missing)}")
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in data.items() if k in known})

    def csv_rows(self) -> List[dict]:
        base = {
            "run_id": self.run_id, "arch": self.arch, "n_students": self.n_students, "k_active": self.k_active,
            "partition_scheme": self.partition_scheme, "alpha": self.alpha, "lambda": self.lambda_,
            "T": self.timesteps, "seed": self.seed, "param_count": self.param_count,
        }
        rows = []
        for result in self.results:
            row = {column: 0 for column in CSV_COLUMNS if column not in TEXT_COLUMNS}
            row.update(base)
            row.update({k: v for k, v in result.items() if k in CSV_COLUMNS and v is not None})
            rows.append(_checked_row(row))
        return rows


def _checked_row(row: dict) -> dict:
    for column in CSV_COLUMNS:
        if column in TEXT_COLUMNS:
            row[column] = str(row.get(column, ""))
            continue
        value = float(row[column])
        if not math.isfinite(value):
            raise ValueError(f"non-finite {column}: {row[column]}")
        row[column] = int(round(value)) if column in INTEGER_COLUMNS else value
    return row


def save_report(report: RunReport, run_dir: Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / REPORT_FILE
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, ensure_ascii=False)
    return path


def load_report(path: Path) -> RunReport:
    with open(path, "r", encoding="utf-8") as f:
        return RunReport.from_dict(json.load(f))


class ReportGenerator:
    def __init__(self, template_dir: Path = TEMPLATE_DIR):
        self.template_dir = template_dir
        self.env = Environment(loader=FileSystemLoader(template_dir),
                               trim_blocks=True,
                               lstrip_blocks=True)

    def collect(self, run_dir: Path) -> Tuple[List[RunReport], List[dict]]:
        """Load every report under `run_dir`; unreadable ones are listed, not fatal."""
        reports, corrupt = [], []
        for path in sorted(Path(run_dir).rglob(REPORT_FILE)):
            try:
                report = load_report(path)
                report.csv_rows()
            except (OSError, ValueError, TypeError, KeyError) as e:
                warning(f"Skipping corrupt report {path}: {e}")
                corrupt.append({"path": str(path), "reason": str(e)})
                continue
            reports.append(report)
        return reports, corrupt

    def summary_frame(self, reports: List[RunReport]) -> pd.DataFrame:
        rows = [row for report in reports for row in report.csv_rows()]
        return pd.DataFrame(rows, columns=CSV_COLUMNS)

    def write_csv(self, frame: pd.DataFrame, output_path: Path) -> Path:
        output_path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(output_path, index=False, columns=CSV_COLUMNS)
        success(f"CSV summary saved to {output_path}")
        return output_path

    def generate_markdown_report(self,
                                 reports: List[RunReport],
                                 corrupt: List[dict],
                                 output_path: Path = Path("summary.md")) -> bool:
        try:
            template = self.env.get_template("summary.md.j2")
            runs = []
            for report in reports:
                final = report.epochs[-1] if report.epochs else {}
                runs.append({
                    "run_id": report.run_id,
                    "command": report.command,
                    "arch": report.arch,
                    "seed": report.seed,
                    "param_count": report.param_count,
                    "wall_clock": f"{report.wall_clock_seconds:.1f}",
                    "epochs": len(report.epochs),
                    "final_loss": f"{final.get('loss', 0.0):.4f}" if final else "-",
                    "rows": [{**row, "accuracy_str": f"{row['accuracy']:.4f}", "sem_str": f"{row['sem']:.4f}"}
                             for row in report.csv_rows()],
                })
            content = template.render(generated=datetime.now().strftime('%Y-%m-%d %H:%M:%S'),
                                      runs=runs,
                                      corrupt=corrupt)
            with open(output_path, 'w', encoding='utf-8') as f:
                f.write(content)
            success(f"Markdown summary saved to {output_path}")
            return True

        except Exception as e:
            error(f"Error generating Markdown summary: {e}")
            return False

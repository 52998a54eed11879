import csv
import logging
from pathlib import Path
from typing import Any, Iterable, List, Optional, Sequence

from app.models.results import ResultBundle
from app.utils.formatting import format_float, pretty_json

logger = logging.getLogger(__name__)

HISTOGRAM_HEADER = ["value", "probability"]
RATES_HEADER = ["t", "S_dot", "S_dot_i", "S_dot_a", "S_dot_na", "W_dot", "Q_dot", "U_dot", "X_dot"]
SWEEP_HEADER = ["beta1", "beta1_virtual", "beta2_virtual", "beta3_virtual", "Q1", "Q2", "Q3"]
LEDGER_HEADER = ["probability", "delta_s", "delta_s_a", "delta_s_na", "sigma_s", "sigma_e", "i_tilde"]


def _cell(value: Optional[float]) -> str:
    return "nan" if value is None else format_float(value)


class ResultWriter:
    """Writes a ResultBundle as CSV and JSON files; output is a pure function of the bundle."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)

    def emit(self, bundle: ResultBundle) -> List[Path]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        digest = bundle.provenance.config_hash
        written: List[Path] = []

        if "histogram" in bundle.outputs:
            for i, series in enumerate(bundle.histograms):
                name = "histogram.csv" if i == 0 else f"histogram_{series.label}.csv"
                rows = zip(series.values, series.probabilities)
                written.append(self._csv(name, HISTOGRAM_HEADER, rows, digest))
        if "rates" in bundle.outputs:
            rows = ([getattr(r, key) for key in RATES_HEADER] for r in bundle.rates)
            written.append(self._csv("rates.csv", RATES_HEADER, rows, digest))
        if "sweep" in bundle.outputs:
            rows = ([getattr(r, key) for key in SWEEP_HEADER] for r in bundle.sweep)
            written.append(self._csv("sweep.csv", SWEEP_HEADER, rows, digest))
        if "ledger" in bundle.outputs:
            rows = ([getattr(r, key) for key in LEDGER_HEADER] for r in bundle.ledger)
            written.append(self._csv("ledger.csv", LEDGER_HEADER, rows, digest))
        if "ft_report" in bundle.outputs and bundle.ft_report is not None:
            report = bundle.ft_report.model_dump()
            report["config_hash"] = digest
            written.append(self._json("ft_report.json", report))

        written.append(self._json("provenance.json", bundle.provenance.model_dump()))
        for path in written:
            logger.debug("wrote %s", path)
        return written

    def _csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]], digest: str) -> Path:
        path = self.out_dir / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(v) for v in row])
            fh.write(f"# config_hash={digest}\n")
        return path

    def _json(self, name: str, payload: dict) -> Path:
        path = self.out_dir / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(pretty_json(payload))
        return path

# SPDX-FileCopyrightText: Magenta ApS
#
# SPDX-License-Identifier: MPL-2.0
"""Population-scale runs: sample devices, test each one, aggregate, report."""
import csv
import dataclasses
import io
import json
import logging
import math
import warnings
from asyncio import gather
from asyncio import get_running_loop
from concurrent.futures import Executor
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from dataclasses import field
from fractions import Fraction
from functools import partial
from pathlib import Path
from types import TracebackType
from typing import Dict
from typing import Iterable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Type

import numpy as np
from more_itertools import chunked
from more_itertools import first
from ra_utils.syncable import Syncable
from tenacity import retry
from tenacity import retry_if_exception_type
from tenacity import stop_after_delay
from tenacity import wait_exponential

from upstream_aqm_sim.config import as_record
from upstream_aqm_sim.harness import admission_check
from upstream_aqm_sim.harness import AdmissionRejected
from upstream_aqm_sim.harness import AdmissionState
from upstream_aqm_sim.harness import format_float
from upstream_aqm_sim.harness import nearest_rank
from upstream_aqm_sim.harness import release_reservation
from upstream_aqm_sim.harness import Reservation
from upstream_aqm_sim.harness import run_latency_under_load
from upstream_aqm_sim.harness import TestConfig
from upstream_aqm_sim.harness import TestReport
from upstream_aqm_sim.qdisc import Discipline
from upstream_aqm_sim.sim_core import milliseconds
from upstream_aqm_sim.sim_core import rng_uniform
from upstream_aqm_sim.sim_core import RngStream
from upstream_aqm_sim.sim_core import seconds
from upstream_aqm_sim.sim_core import SimTime
from upstream_aqm_sim.sim_core import SimulationFault
from upstream_aqm_sim.sim_core import to_milliseconds

logger = logging.getLogger(__name__)

retry_max_time = 60

BIN_WIDTH_MS = 15
BIN_COUNT = 67
"""Regular bins cover [0, 1005) ms; one overflow bin follows."""

BAND_LOW_MS = 15.0
"""The [15, 30) ms band of the headline comparison."""

MAX_INVALID_FRACTION = Fraction(1, 100)

DEVICES_CSV = "devices.csv"
MEAN_CDF_CSV = "mean_cdf.csv"
MAX_CDF_CSV = "max_cdf.csv"
HISTOGRAM_CSV = "histogram.csv"
MANIFEST_JSON = "manifest.json"

DEVICE_COLUMNS = [
    "device_id",
    "discipline",
    "rate_bps",
    "flows",
    "base_rtt_ms",
    "mean_ms",
    "max_ms",
    "p99_ms",
]


class FleetRunError(SimulationFault):
    """Too many devices produced no usable report."""


class ReportError(ValueError):
    """A report directory could not be written or read back."""


def _default_mix() -> Dict[Discipline, float]:
    return {Discipline.DOCSIS_PIE: 0.68, Discipline.BUFFER_CONTROL_FIFO: 0.32}


def _default_rate_plans() -> Dict[int, float]:
    return {5_000_000: 1.0, 10_000_000: 1.0, 20_000_000: 1.0, 35_000_000: 1.0}


@dataclass(frozen=True)
class FleetConfig:
    """How to draw a device population.

    `template` carries the settings every device shares. Each device overrides
    its label, discipline, rate, base RTT, flow count, buffer and seed.
    """

    devices: int = 1000
    mix: Dict[Discipline, float] = field(default_factory=_default_mix)
    """Fraction of devices per discipline."""
    rate_plans_bps: Dict[int, float] = field(default_factory=_default_rate_plans)
    """Upstream rate plans and their relative weights."""
    flows_min: int = 1
    flows_max: int = 8
    base_rtt_min: SimTime = milliseconds(5)
    base_rtt_max: SimTime = milliseconds(25)
    bloated_fraction: float = 0.15
    """Share of FIFO devices with an oversized static buffer."""
    bloated_delay_min: SimTime = milliseconds(500)
    bloated_delay_max: SimTime = seconds(1.5)
    master_seed: int = 0
    server_capacity_bps: int = 1_000_000_000
    template: TestConfig = TestConfig(label="device")

    def __post_init__(self) -> None:
        if self.devices < 0:
            raise ValueError("devices must not be negative")
        if not self.mix or any(fraction < 0 for fraction in self.mix.values()):
            raise ValueError("mix needs at least one non-negative fraction")
        if not math.isclose(sum(self.mix.values()), 1.0, abs_tol=1e-9):
            raise ValueError("mix fractions must sum to 1")
        if not self.rate_plans_bps or any(
            rate <= 0 or weight <= 0 for rate, weight in self.rate_plans_bps.items()
        ):
            raise ValueError("rate_plans_bps needs positive rates and weights")
        if not 0 <= self.flows_min <= self.flows_max:
            raise ValueError("flows range is empty")
        if not 0 < self.base_rtt_min <= self.base_rtt_max:
            raise ValueError("base RTT range is empty or not positive")
        if not 0 <= self.bloated_fraction <= 1:
            raise ValueError("bloated_fraction must be within [0, 1]")
        if not 0 <= self.bloated_delay_min <= self.bloated_delay_max:
            raise ValueError("bloated delay range is empty")
        if self.server_capacity_bps <= 0:
            raise ValueError("server_capacity_bps must be positive")


def _assign_disciplines(mix: Dict[Discipline, float], devices: int) -> List[Discipline]:
    """Prefix-stable apportionment of disciplines to devices.

    Device i takes the discipline furthest below its quota among the first
    i + 1 devices, so every prefix of the assignment is itself apportioned.
    """
    quotas = {
        discipline: Fraction(fraction).limit_denominator(10 ** 6)
        for discipline, fraction in mix.items()
    }
    counts = dict.fromkeys(quotas, 0)
    assigned = []
    for i in range(devices):
        choice = max(quotas, key=lambda d: (i + 1) * quotas[d] - counts[d])
        counts[choice] += 1
        assigned.append(choice)
    return assigned


def _weighted_choice(stream: RngStream, weights: Dict[int, float]) -> int:
    options = sorted(weights)
    cumulative = np.cumsum([weights[option] for option in options])
    draw = stream.random() * cumulative[-1]
    index = int(np.searchsorted(cumulative, draw, side="right"))
    return options[min(index, len(options) - 1)]


def _device_config(
    cfg: FleetConfig, device_id: int, discipline: Discipline
) -> TestConfig:
    stream = RngStream(cfg.master_seed, f"device-{device_id}")
    rate_bps = _weighted_choice(stream, cfg.rate_plans_bps)
    flows = stream.integers(cfg.flows_min, cfg.flows_max + 1)
    log_rtt = rng_uniform(
        stream, math.log(cfg.base_rtt_min), math.log(cfg.base_rtt_max)
    )
    base_rtt = SimTime(
        min(cfg.base_rtt_max, max(cfg.base_rtt_min, round(math.exp(log_rtt))))
    )
    # Drawn for every device so the remaining draws line up across disciplines
    bloated = stream.random() < cfg.bloated_fraction
    bloated_delay = SimTime(
        round(rng_uniform(stream, cfg.bloated_delay_min, cfg.bloated_delay_max))
    )
    seed = stream.integers(0, 2 ** 63)

    template = cfg.template
    buffer_delay = template.buffer_delay
    if bloated and discipline == Discipline.BUFFER_CONTROL_FIFO:
        buffer_delay = bloated_delay
    return dataclasses.replace(
        template,
        label=f"device-{device_id:05d}",
        discipline=discipline,
        link=dataclasses.replace(template.link, rate_bps=rate_bps, base_rtt=base_rtt),
        load_flows=flows,
        buffer_delay=buffer_delay,
        seed=seed,
    )


def sample_population(cfg: FleetConfig) -> List[TestConfig]:
    """Draw `cfg.devices` test scenarios.

    Device i depends on `(cfg.master_seed, i)` and the discipline quota only,
    so growing the fleet never changes devices already drawn.
    """
    disciplines = _assign_disciplines(cfg.mix, cfg.devices)
    return [
        _device_config(cfg, device_id, discipline)
        for device_id, discipline in enumerate(disciplines)
    ]


def _rounded(value: float) -> float:
    return float(format_float(value))


@dataclass(frozen=True)
class DeviceResult:
    """One device's row of the per-device table, at CSV precision."""

    device_id: int
    discipline: Discipline
    rate_bps: int
    flows: int
    base_rtt_ms: float
    mean_ms: float
    max_ms: float
    p99_ms: float

    @classmethod
    def from_report(
        cls, device_id: int, cfg: TestConfig, report: TestReport
    ) -> "DeviceResult":
        if report.stats is None:
            raise ValueError(f"Report of {report.label} has no statistics")
        return cls(
            device_id=device_id,
            discipline=cfg.discipline,
            rate_bps=cfg.link.rate_bps,
            flows=cfg.load_flows,
            base_rtt_ms=_rounded(to_milliseconds(cfg.link.base_rtt)),
            mean_ms=_rounded(report.stats.mean_ms),
            max_ms=_rounded(report.stats.max_ms),
            p99_ms=_rounded(report.stats.p99_ms),
        )

    def as_row(self) -> List[str]:
        return [
            str(self.device_id),
            self.discipline.value,
            str(self.rate_bps),
            str(self.flows),
            format_float(self.base_rtt_ms),
            format_float(self.mean_ms),
            format_float(self.max_ms),
            format_float(self.p99_ms),
        ]

    @classmethod
    def from_row(cls, row: Dict[str, str]) -> "DeviceResult":
        return cls(
            device_id=int(row["device_id"]),
            discipline=Discipline(row["discipline"]),
            rate_bps=int(row["rate_bps"]),
            flows=int(row["flows"]),
            base_rtt_ms=float(row["base_rtt_ms"]),
            mean_ms=float(row["mean_ms"]),
            max_ms=float(row["max_ms"]),
            p99_ms=float(row["p99_ms"]),
        )


CdfPoints = List[Tuple[float, float]]


def empirical_cdf(values: Sequence[float]) -> CdfPoints:
    """Empirical CDF as (value, fraction of values <= value), ties collapsed."""
    if not values:
        return []
    unique, counts = np.unique(np.asarray(values, dtype=float), return_counts=True)
    cumulative = np.cumsum(counts) / len(values)
    return list(zip(unique.tolist(), cumulative.tolist()))


def histogram(
    values: Sequence[float], bin_width: float = BIN_WIDTH_MS, bins: int = BIN_COUNT
) -> List[float]:
    """Fractions of `values` per bin; the last entry is the overflow bin."""
    if not values:
        return [0.0] * (bins + 1)
    edges = np.arange(bins + 1) * bin_width
    index = np.searchsorted(edges, np.asarray(values, dtype=float), side="right") - 1
    counts = np.bincount(np.minimum(index, bins), minlength=bins + 1)
    return (counts / len(values)).tolist()


def _variants(devices: Iterable[DeviceResult]) -> List[Discipline]:
    present = {device.discipline for device in devices}
    return [discipline for discipline in Discipline if discipline in present]


@dataclass
class FleetSummary:
    """Per-device results and the distributions derived from them."""

    devices: List[DeviceResult]
    invalid_count: int = 0
    master_seed: int = 0
    config: Dict[str, str] = field(default_factory=dict)
    bin_width_ms: int = BIN_WIDTH_MS
    bin_count: int = BIN_COUNT
    mean_cdf: Dict[Discipline, CdfPoints] = field(default_factory=dict)
    max_cdf: Dict[Discipline, CdfPoints] = field(default_factory=dict)
    histogram: Dict[Discipline, List[float]] = field(default_factory=dict)

    @property
    def variants(self) -> List[Discipline]:
        return _variants(self.devices)

    def of(self, discipline: Optional[Discipline] = None) -> List[DeviceResult]:
        """Devices of one discipline, or all of them."""
        if discipline is None:
            return list(self.devices)
        return [device for device in self.devices if device.discipline == discipline]

    def band_fraction(
        self, discipline: Optional[Discipline] = None, low_ms: float = BAND_LOW_MS
    ) -> float:
        """Fraction of device means in the bin starting at `low_ms`."""
        index = int(low_ms // self.bin_width_ms)
        means = [device.mean_ms for device in self.of(discipline)]
        return histogram(means, self.bin_width_ms, self.bin_count)[index]


def summarize_fleet(
    devices: Iterable[DeviceResult],
    invalid_count: int = 0,
    master_seed: int = 0,
    config: Optional[Dict[str, str]] = None,
    bin_width_ms: int = BIN_WIDTH_MS,
    bin_count: int = BIN_COUNT,
) -> FleetSummary:
    ordered = sorted(devices, key=lambda device: device.device_id)
    summary = FleetSummary(
        devices=ordered,
        invalid_count=invalid_count,
        master_seed=master_seed,
        config=dict(config or {}),
        bin_width_ms=bin_width_ms,
        bin_count=bin_count,
    )
    for discipline in summary.variants:
        members = summary.of(discipline)
        means = [device.mean_ms for device in members]
        summary.mean_cdf[discipline] = empirical_cdf(means)
        summary.max_cdf[discipline] = empirical_cdf([d.max_ms for d in members])
        summary.histogram[discipline] = histogram(means, bin_width_ms, bin_count)
    return summary


class AsyncFleetRunner:
    """Runs device tests concurrently against one shared measurement server.

    Example:
        ```Python
        from upstream_aqm_sim import AsyncFleetRunner, FleetConfig

        runner = AsyncFleetRunner(workers=4)
        async with runner:
            summary = await runner.run_fleet(FleetConfig(devices=100))
        ```
    """

    def __init__(self, workers: int = 1, chunk_size: Optional[int] = None) -> None:
        """Construct a fleet runner.

        Args:
            workers: Simulation processes; 1 runs everything in one thread.
            chunk_size: Devices admitted per batch, defaults to 4 per worker.
        """
        if workers < 1:
            raise ValueError("workers must be at least 1")
        self._workers = workers
        self._chunk_size = chunk_size or 4 * workers
        self._executor: Optional[Executor] = None

    async def __aenter__(self) -> "AsyncFleetRunner":
        await self.aopen()
        return self

    async def __aexit__(
        self,
        exc_type: Optional[Type[BaseException]],
        exc_value: Optional[BaseException],
        exc_traceback: Optional[TracebackType],
    ) -> bool:
        await self.aclose()
        return False

    async def aopen(self) -> None:
        if self._executor:
            warnings.warn("aopen called with existing executor", UserWarning)
            return
        if self._workers == 1:
            self._executor = ThreadPoolExecutor(max_workers=1)
        else:
            self._executor = ProcessPoolExecutor(max_workers=self._workers)

    async def aclose(self) -> None:
        if self._executor is None:
            warnings.warn("aclose called without executor", UserWarning)
            return
        self._executor.shutdown(wait=True)
        self._executor = None

    def _get_executor(self) -> Executor:
        if self._executor is None:
            raise ValueError("Executor not set")
        return self._executor

    @retry(
        reraise=True,
        retry=retry_if_exception_type(AdmissionRejected),
        wait=wait_exponential(multiplier=0.01, max=1),
        stop=stop_after_delay(retry_max_time),
    )
    async def _admit(self, pool: AdmissionState, cfg: TestConfig) -> Reservation:
        """Reserve server capacity, retrying later while the server is full."""
        try:
            return admission_check(pool, cfg.link.rate_bps, client=cfg.label)
        except AdmissionRejected as exc:
            logger.debug("%s: %s", cfg.label, exc)
            raise

    async def _run_device(
        self, pool: AdmissionState, cfg: TestConfig
    ) -> TestReport:
        reservation = await self._admit(pool, cfg)
        try:
            loop = get_running_loop()
            return await loop.run_in_executor(
                self._get_executor(), run_latency_under_load, cfg
            )
        finally:
            release_reservation(pool, reservation)

    async def run(
        self, population: Sequence[TestConfig], server_capacity_bps: int = 1_000_000_000
    ) -> List[TestReport]:
        """Test every device; reports come back in population order.

        Raises:
            ValueError: If the population is empty.
            AdmissionRejected: If a device is never admitted.
        """
        if not population:
            raise ValueError("Cannot run an empty population")
        pool = AdmissionState(server_capacity_bps)
        reports: List[TestReport] = []
        for batch in chunked(population, self._chunk_size):
            reports.extend(await gather(*map(partial(self._run_device, pool), batch)))
            logger.info("Tested %d of %d devices", len(reports), len(population))
        return reports

    async def run_fleet(self, cfg: FleetConfig) -> FleetSummary:
        """Sample, test and summarize a fleet.

        Args:
            cfg: The fleet to draw.

        Raises:
            FleetRunError: If more than 1% of the reports are invalid.

        Returns:
            * FleetSummary: Valid devices ordered by device id.
        """
        population = sample_population(cfg)
        reports = await self.run(population, cfg.server_capacity_bps)
        results: List[DeviceResult] = []
        invalid = 0
        for device_id, (device, report) in enumerate(zip(population, reports)):
            if not report.valid:
                logger.warning("%s: excluded, %s", report.label, report.invalid_reason)
                invalid += 1
                continue
            results.append(DeviceResult.from_report(device_id, device, report))
        if invalid > MAX_INVALID_FRACTION * len(population):
            raise FleetRunError(
                f"{invalid} of {len(population)} device reports are invalid"
            )
        return summarize_fleet(results, invalid, cfg.master_seed, as_record(cfg))


class FleetRunner(Syncable, AsyncFleetRunner):
    """Synchronous fleet runner.

        Example:
            ```Python
            from upstream_aqm_sim import FleetRunner, FleetConfig

            runner = FleetRunner()
            with runner:
                summary = runner.run_fleet(FleetConfig(devices=10))
            ```

    Is implemented atop the `AsyncFleetRunner` using `ra_utils.Syncable`.
    """

    pass


def _csv_text(header: List[str], rows: Iterable[List[str]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


def _cdf_rows(cdfs: Dict[Discipline, CdfPoints]) -> Iterable[List[str]]:
    for discipline, points in cdfs.items():
        for value, fraction in points:
            yield [discipline.value, format_float(value), format_float(fraction)]


def _histogram_rows(summary: FleetSummary) -> Iterable[List[str]]:
    width = summary.bin_width_ms
    for discipline, fractions in summary.histogram.items():
        for index, fraction in enumerate(fractions):
            low = index * width
            high = str(low + width) if index < summary.bin_count else "inf"
            yield [str(low), high, discipline.value, format_float(fraction)]


def report_files(summary: FleetSummary) -> Dict[str, str]:
    """The report file set as file name to content."""
    from upstream_aqm_sim import __version__

    manifest = {
        "tool": "upstream-aqm-sim",
        "tool_version": __version__,
        "master_seed": summary.master_seed,
        "device_count": len(summary.devices),
        "invalid_count": summary.invalid_count,
        "bin_width_ms": summary.bin_width_ms,
        "bin_count": summary.bin_count,
        "variants": {
            discipline.value: {
                "device_model": discipline.device_model,
                "devices": len(summary.of(discipline)),
            }
            for discipline in summary.variants
        },
        "config": summary.config,
    }
    return {
        DEVICES_CSV: _csv_text(
            DEVICE_COLUMNS, (device.as_row() for device in summary.devices)
        ),
        MEAN_CDF_CSV: _csv_text(
            ["variant", "value_ms", "cumulative_fraction"],
            _cdf_rows(summary.mean_cdf),
        ),
        MAX_CDF_CSV: _csv_text(
            ["variant", "value_ms", "cumulative_fraction"],
            _cdf_rows(summary.max_cdf),
        ),
        HISTOGRAM_CSV: _csv_text(
            ["bin_low_ms", "bin_high_ms", "variant", "fraction"],
            _histogram_rows(summary),
        ),
        MANIFEST_JSON: json.dumps(manifest, indent=2, sort_keys=True) + "\n",
    }


def emit_reports(summary: FleetSummary, out_dir: Path) -> List[Path]:
    """Write the report file set into `out_dir`.

    Raises:
        ReportError: If the directory or a file cannot be written.

    Returns:
        * list: The written paths.
    """
    written = []
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, content in report_files(summary).items():
            path = out_dir / name
            path.write_text(content, encoding="utf-8", newline="\n")
            written.append(path)
    except OSError as exc:
        raise ReportError(f"Cannot write reports to {exc.filename or out_dir}")
    return written


def load_summary(report_dir: Path) -> FleetSummary:
    """Re-derive a summary from the per-device CSV and manifest of a report.

    Raises:
        ReportError: If a file is missing or malformed.
    """
    manifest_path = report_dir / MANIFEST_JSON
    devices_path = report_dir / DEVICES_CSV
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        bin_width = int(manifest["bin_width_ms"])
        bin_count = int(manifest["bin_count"])
    except OSError:
        raise ReportError(f"Cannot read {manifest_path}")
    except (ValueError, KeyError, TypeError):
        raise ReportError(f"Malformed manifest {manifest_path}")
    try:
        with devices_path.open(encoding="utf-8", newline="") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames != DEVICE_COLUMNS:
                raise ReportError(f"Unexpected columns in {devices_path}")
            devices = [DeviceResult.from_row(row) for row in reader]
    except OSError:
        raise ReportError(f"Cannot read {devices_path}")
    except (ValueError, KeyError) as exc:
        if isinstance(exc, ReportError):
            raise
        raise ReportError(f"Malformed row in {devices_path}: {exc}")
    return summarize_fleet(
        devices,
        invalid_count=int(manifest.get("invalid_count", 0)),
        master_seed=int(manifest.get("master_seed", 0)),
        config=manifest.get("config", {}),
        bin_width_ms=bin_width,
        bin_count=bin_count,
    )


@dataclass(frozen=True)
class ComparisonRow:
    """Signed differences `a - b` for one variant."""

    variant: str
    median_mean_delta_ms: float
    median_max_delta_ms: float
    band_fraction_delta: float

    def __neg__(self) -> "ComparisonRow":
        return ComparisonRow(
            self.variant,
            -self.median_mean_delta_ms,
            -self.median_max_delta_ms,
            -self.band_fraction_delta,
        )


ALL_VARIANTS = "all"


def _median(values: Sequence[float]) -> float:
    return nearest_rank(values, 0.5)


def _row(
    variant: str, a: List[DeviceResult], b: List[DeviceResult], a_band: float, b_band: float
) -> ComparisonRow:
    return ComparisonRow(
        variant=variant,
        median_mean_delta_ms=_median([d.mean_ms for d in a])
        - _median([d.mean_ms for d in b]),
        median_max_delta_ms=_median([d.max_ms for d in a])
        - _median([d.max_ms for d in b]),
        band_fraction_delta=a_band - b_band,
    )


def compare(a: FleetSummary, b: FleetSummary) -> List[ComparisonRow]:
    """Per-variant differences between two fleets, plus an `all` row.

    Variants present in only one fleet get no row of their own.

    Raises:
        ValueError: If the fleets use different histogram bins or one is empty.
    """
    if (a.bin_width_ms, a.bin_count) != (b.bin_width_ms, b.bin_count):
        raise ValueError(
            f"Histogram bins differ: {a.bin_count}x{a.bin_width_ms} ms "
            f"vs {b.bin_count}x{b.bin_width_ms} ms"
        )
    if not a.devices or not b.devices:
        raise ValueError("Cannot compare an empty fleet")
    rows = [
        _row(
            discipline.value,
            a.of(discipline),
            b.of(discipline),
            a.band_fraction(discipline),
            b.band_fraction(discipline),
        )
        for discipline in a.variants
        if discipline in b.variants
    ]
    rows.append(
        _row(ALL_VARIANTS, a.devices, b.devices, a.band_fraction(), b.band_fraction())
    )
    return rows


def verdict(rows: Sequence[ComparisonRow]) -> str:
    overall = first(row for row in rows if row.variant == ALL_VARIANTS)
    delta = overall.median_mean_delta_ms
    if delta < 0:
        return f"A has the lower median latency under load, by {format_float(-delta)} ms"
    if delta > 0:
        return f"B has the lower median latency under load, by {format_float(delta)} ms"
    return "A and B have the same median latency under load"


def format_comparison(rows: Sequence[ComparisonRow]) -> str:
    """The comparison as CSV text followed by a verdict line."""
    table = _csv_text(
        [
            "variant",
            "median_mean_delta_ms",
            "median_max_delta_ms",
            "band_15_30_fraction_delta",
        ],
        (
            [
                row.variant,
                format_float(row.median_mean_delta_ms),
                format_float(row.median_max_delta_ms),
                format_float(row.band_fraction_delta),
            ]
            for row in rows
        ),
    )
    return table + verdict(rows) + "\n"


def run_fleet(cfg: FleetConfig, workers: int = 1) -> FleetSummary:
    """Run a fleet synchronously."""
    runner = FleetRunner(workers=workers)
    with runner:
        summary: FleetSummary = runner.run_fleet(cfg)
    return summary


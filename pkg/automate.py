import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

from errors import ConfigError, RegionMakeupError

logger = logging.getLogger(__name__)

# Ablation grid: one job per table row. The grid itself lives in the config
# ("ablation" section); this module names the jobs, gives each an isolated
# directory and keeps going when one of them fails.

ENCODER_VARIANTS = ("none", "ssl", "text", "ssl+text")
INJECTION_FLAGS = ("lora", "pixel", "structure")
TABLES = ("encoder", "injection", "attention", "alignment")


@dataclass(frozen=True)
class AblationJob:
    table: str
    name: str
    params: dict = field(default_factory=dict)


def _flag(value):
    return "1" if value else "0"


def job_name(table, params):
    if table == "encoder":
        return f"encoder_{params['variant'].replace('+', '_')}"
    if table == "injection":
        return "injection_" + "_".join(f"{k}{_flag(params[k])}" for k in INJECTION_FLAGS)
    if table == "attention":
        return f"attn_loss{_flag(params['attn'])}"
    return "alignment"


def ablation_jobs(section, tables=None):
    """
    Expand the ablation section into jobs, in table then row order.
    Raises ConfigError when a table is missing or cannot form a comparison.
    """
    tables = TABLES if tables is None else tuple(tables)
    jobs = []
    for table in tables:
        if table not in TABLES:
            raise ConfigError(f"unknown ablation table '{table}'")
        if table == "alignment":
            jobs.append(AblationJob(table, job_name(table, {})))
            continue
        if table not in section or not section[table]:
            raise ConfigError(f"ablation grid has no rows for '{table}'")
        rows = section[table]
        if table == "encoder":
            unknown = [v for v in rows if v not in ENCODER_VARIANTS]
            if unknown:
                raise ConfigError(f"unknown encoder variants {unknown} (expected some of {list(ENCODER_VARIANTS)})")
            if "none" not in rows or "ssl+text" not in rows:
                raise ConfigError("encoder needs at least the 'none' and 'ssl+text' rows")
            params = [{"variant": v} for v in rows]
        elif table == "injection":
            for row in rows:
                if not isinstance(row, dict) or set(row) != set(INJECTION_FLAGS):
                    raise ConfigError(f"injection rows must set exactly {list(INJECTION_FLAGS)}, got {row}")
            if not any(all(row[k] for k in INJECTION_FLAGS) for row in rows):
                raise ConfigError("injection needs the full-model row (lora, pixel and structure on)")
            params = [dict(row) for row in rows]
        else:
            if set(bool(v) for v in rows) != {False, True}:
                raise ConfigError("attention needs both the attention-loss-off and -on rows")
            params = [{"attn": bool(v)} for v in rows]
        jobs.extend(AblationJob(table, job_name(table, p), p) for p in params)
    return jobs


def run_jobs(jobs, runner, out_dir):
    """
    Run ``runner(job, job_dir)`` for every job in its own directory under ``out_dir``.
    Returns:
        (list of (job, row) for finished jobs, list of failed jobs)
    """
    out = Path(out_dir)
    finished, failed = [], []
    total_jobs = len(jobs)
    for job_counter, job in enumerate(jobs, start=1):
        job_dir = out / job.name
        job_dir.mkdir(parents=True, exist_ok=True)
        logger.info("Job %d/%d : %s", job_counter, total_jobs, job.name)
        start = time.perf_counter()
        try:
            row = runner(job, job_dir)
        except (RegionMakeupError, RuntimeError, ValueError) as e:
            logger.error("Error while executing %s: %s", job.name, e)
            (job_dir / "FAILED").write_text(f"{type(e).__name__}: {e}\n", encoding="utf-8")
            failed.append(job)
            continue
        finished.append((job, row))
        logger.info("%s finished in %.1f s", job.name, time.perf_counter() - start)
    logger.info("All jobs have finished (%d ok, %d failed)", len(finished), len(failed))
    return finished, failed

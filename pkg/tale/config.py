import os
from dataclasses import dataclass


def getenv(name: str, default: str | None = None) -> str | None:
    value = os.getenv(name)
    if value is None:
        return default
    return value


@dataclass
class Settings:
    # Per-op NaN/Inf assertions inside the autodiff engine
    check_finite: bool = getenv("TALE_CHECK_FINITE", "0").lower() in {"1", "true", "yes"}
    log_level: str = getenv("TALE_LOG_LEVEL", "INFO").upper()
    threads: int = int(getenv("TALE_THREADS", "1"))
    output_dir: str = getenv("TALE_OUTPUT_DIR", "./runs")


settings = Settings()

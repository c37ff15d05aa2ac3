from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar

_LOG_LEVELS = frozenset({"TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR"})


@dataclass(frozen=True, slots=True, kw_only=True)
class Settings:
    DEFAULT_OUTPUT_DIR: ClassVar[Path] = Path("runs")
    DEFAULT_MAX_CONCURRENT: ClassVar[int] = 4
    DEFAULT_LOG_LEVEL: ClassVar[str] = "INFO"
    DEFAULT_TOP_K: ClassVar[int] = 5
    DEFAULT_PROMPT_COUNT: ClassVar[int] = 100
    DEFAULT_PROMPT_LENGTH: ClassVar[int] = 8
    DEFAULT_MAX_NEW_TOKENS: ClassVar[int] = 16

    output_dir: Path = DEFAULT_OUTPUT_DIR
    max_concurrent: int = DEFAULT_MAX_CONCURRENT
    log_level: str = DEFAULT_LOG_LEVEL
    top_k: int = DEFAULT_TOP_K
    prompt_count: int = DEFAULT_PROMPT_COUNT
    prompt_length: int = DEFAULT_PROMPT_LENGTH
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS

    def __post_init__(self) -> None:
        positive_counts = {
            "max_concurrent": self.max_concurrent,
            "prompt_count": self.prompt_count,
            "prompt_length": self.prompt_length,
            "max_new_tokens": self.max_new_tokens,
        }
        for name, value in positive_counts.items():
            if value < 1:
                raise ValueError(f"Settings {name} must be positive")
        if self.top_k < 2:
            raise ValueError("Settings top_k must be at least 2")
        if self.log_level not in _LOG_LEVELS:
            raise ValueError(f"Settings log_level must be one of {sorted(_LOG_LEVELS)}")

    @classmethod
    def from_sources(
        cls,
        *,
        env: Mapping[str, str],
        output_dir: Path | None = None,
        max_concurrent: int | None = None,
        log_level: str | None = None,
        top_k: int | None = None,
        prompt_count: int | None = None,
        prompt_length: int | None = None,
        max_new_tokens: int | None = None,
    ) -> Settings:
        if output_dir is None and (env_dir := env.get("LAYERCAST_OUTPUT_DIR")):
            output_dir = Path(env_dir)
        if max_concurrent is None and (
            env_concurrent := env.get("LAYERCAST_MAX_CONCURRENT")
        ):
            try:
                max_concurrent = int(env_concurrent)
            except ValueError as error:
                raise ValueError(
                    f"LAYERCAST_MAX_CONCURRENT must be an integer, got {env_concurrent!r}"
                ) from error
        if log_level is None:
            log_level = env.get("LAYERCAST_LOG_LEVEL")

        return cls(
            output_dir=output_dir if output_dir is not None else cls.DEFAULT_OUTPUT_DIR,
            max_concurrent=(
                max_concurrent
                if max_concurrent is not None
                else cls.DEFAULT_MAX_CONCURRENT
            ),
            log_level=(
                log_level.upper() if log_level is not None else cls.DEFAULT_LOG_LEVEL
            ),
            top_k=top_k if top_k is not None else cls.DEFAULT_TOP_K,
            prompt_count=(
                prompt_count if prompt_count is not None else cls.DEFAULT_PROMPT_COUNT
            ),
            prompt_length=(
                prompt_length
                if prompt_length is not None
                else cls.DEFAULT_PROMPT_LENGTH
            ),
            max_new_tokens=(
                max_new_tokens
                if max_new_tokens is not None
                else cls.DEFAULT_MAX_NEW_TOKENS
            ),
        )

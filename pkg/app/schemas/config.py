# app/schemas/config.py
from __future__ import annotations

from pathlib import Path
from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class HyperParams(BaseModel):
    model_config = ConfigDict(populate_by_name=True, frozen=True, extra="forbid")

    m: int = Field(default=4, gt=0)
    d: int = Field(default=16, gt=0)
    h: int = Field(default=32, gt=0)
    k_top: int = Field(default=2, gt=0)
    lam: float = Field(default=0.1, ge=0.0, alias="lambda")
    mlp_widths: List[int] = Field(default_factory=lambda: [200, 80, 2])

    memory_init: Literal["zeros", "uniform"] = "zeros"
    init_seed: int = 0
    profile_dim: int = Field(default=0, ge=0)
    unknown_id_policy: Literal["oov", "reject"] = "oov"

    # ablation switches
    mur: bool = True
    miu: bool = True

    @field_validator("mlp_widths")
    @classmethod
    def _widths(cls, v: List[int]) -> List[int]:
        if not v or any(w <= 0 for w in v):
            raise ValueError("mlp_widths must be positive")
        if v[-1] != 2:
            raise ValueError("last mlp width must be 2 (click / no-click)")
        return v

    @model_validator(mode="after")
    def _k_top(self) -> "HyperParams":
        if self.k_top > self.m:
            raise ValueError(f"k_top ({self.k_top}) must be <= m ({self.m})")
        return self

    def dims(self) -> tuple:
        return (self.m, self.d, self.h)


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: Literal["mimn", "embedding_mlp"] = "mimn"
    lr0: float = Field(default=0.001, gt=0.0)
    decay_rate: float = Field(default=0.9, gt=0.0, le=1.0)
    # None = 1 epoch 分の step 数
    decay_interval: Optional[int] = Field(default=None, gt=0)
    batch_size: int = Field(default=128, gt=0)
    epochs: int = Field(default=2, ge=0)
    seed: int = 0
    workers: int = Field(default=1, gt=0)
    progress: bool = False
    hyper: HyperParams = Field(default_factory=HyperParams)

    @property
    def mur(self) -> bool:
        return self.hyper.mur

    @property
    def miu(self) -> bool:
        return self.hyper.miu


class LoadProfile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    request_rate: float = Field(default=200.0, gt=0.0)
    event_rate: float = Field(default=100.0, gt=0.0)
    duration: float = Field(default=5.0, ge=0.0)
    history_len: int = Field(default=100, ge=0)
    mode: Literal["uic", "recompute"] = "uic"
    candidates: int = Field(default=10, gt=0)
    users: int = Field(default=50, gt=0)
    workers: int = Field(default=4, gt=0)
    seed: int = 0


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: Optional[Path] = None
    meta_path: Optional[Path] = None
    format: Literal["amazon", "taobao"] = "amazon"
    min_len: int = Field(default=20, ge=1)
    max_len: int = Field(default=100, ge=1)
    samples_path: Optional[Path] = None
    test_path: Optional[Path] = None
    split_policy: Literal["user_hash", "time_cutoff"] = "user_hash"
    test_fraction: float = Field(default=0.2, ge=0.0, le=1.0)
    time_cutoff: Optional[int] = None
    negatives: bool = True
    exclude_ranges: List[List[int]] = Field(default_factory=list)
    # samples_path の代わりに合成タスクで学習する
    synthetic: Optional[Literal["marker"]] = None
    synthetic_samples: int = Field(default=2000, gt=0)


class AblationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    grid: Literal["slots", "components", "models"] = "components"
    repeats: int = Field(default=3, gt=0)


class GradcheckConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch: int = Field(default=4, gt=0)
    length: int = Field(default=10, gt=0)
    step: float = Field(default=1e-6, gt=0.0, le=1e-3)
    # None = 全座標
    max_entries: Optional[int] = Field(default=None, gt=0)
    threshold: float = Field(default=1e-4, gt=0.0)
    quadratic: bool = False
    inject_sign_bug: Optional[str] = None


class SweepConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    history_lens: List[int] = Field(default_factory=lambda: [100, 400, 1000])
    modes: List[Literal["uic", "recompute"]] = Field(default_factory=lambda: ["uic", "recompute"])

    @field_validator("history_lens")
    @classmethod
    def _lens(cls, v: List[int]) -> List[int]:
        if not v or any(n <= 0 for n in v):
            raise ValueError("history_lens must name at least one positive length")
        return sorted(set(v))

    @field_validator("modes")
    @classmethod
    def _modes(cls, v: List[str]) -> List[str]:
        if not v:
            raise ValueError("modes must not be empty")
        return v


class ServeConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    state_dir: Path = Path("uic_state")
    retention: int = Field(default=7, gt=0)
    checkpoint: Optional[Path] = None
    events_path: Optional[Path] = None
    requests_path: Optional[Path] = None
    snapshot_at_end: bool = False
    rollback_to: Optional[str] = None
    # outsync: UIC 側の状態を作った一世代前の checkpoint
    stale_checkpoint: Optional[Path] = None


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    command: str = ""
    seed: int = 0
    output_dir: Path = Path("runs/latest")
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    bench: LoadProfile = Field(default_factory=LoadProfile)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    gradcheck: GradcheckConfig = Field(default_factory=GradcheckConfig)
    serve: ServeConfig = Field(default_factory=ServeConfig)

    @property
    def hyper(self) -> HyperParams:
        return self.train.hyper

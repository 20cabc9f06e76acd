# app/core/config.py
"""
RunConfig の読み書き。

INI 形式（section 付き key=value）:

    [run]    command / seed / output_dir
    [data]   DataConfig
    [hyper]  HyperParams（train.hyper）
    [train]  TrainConfig（hyper 以外）
    [bench]  LoadProfile
    [sweep]  SweepConfig（bench コマンドの history 長 / mode）
    [ablation] AblationConfig
    [gradcheck] GradcheckConfig
    [serve]  ServeConfig

リスト値は JSON（例: mlp_widths = [200, 80, 2]）。
コマンドラインからは --set section.key=value で上書きする。
"""
from __future__ import annotations

import configparser
import json
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

from pydantic import ValidationError

from app.core.errors import ConfigError
from app.schemas.config import RunConfig

SECTIONS = ("run", "data", "hyper", "train", "bench", "sweep", "ablation", "gradcheck", "serve")
# [run] と [hyper] 以外は RunConfig の同名フィールドにそのまま入る
_FLAT_SECTIONS = ("data", "bench", "sweep", "ablation", "gradcheck", "serve")
EFFECTIVE_CONFIG = "effective_config.ini"


def _parse_value(raw: str) -> Any:
    v = raw.strip()
    if v == "":
        return None
    if v[0] in "[{":
        try:
            return json.loads(v)
        except ValueError:
            raise ConfigError(f"invalid JSON value: {v}") from None
    return v


def _nested(sections: Dict[str, Dict[str, Any]]) -> Dict[str, Any]:
    data: Dict[str, Any] = dict(sections.get("run", {}))
    train = dict(sections.get("train", {}))
    if sections.get("hyper"):
        train["hyper"] = dict(sections["hyper"])
    if train:
        data["train"] = train
    for name in _FLAT_SECTIONS:
        if sections.get(name):
            data[name] = dict(sections[name])
    return data


def apply_override(sections: Dict[str, Dict[str, Any]], override: str) -> None:
    if "=" not in override or "." not in override.split("=", 1)[0]:
        raise ConfigError(f"override must look like section.key=value, got {override!r}")
    lhs, value = override.split("=", 1)
    section, key = lhs.strip().split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r} (expected one of {', '.join(SECTIONS)})")
    sections.setdefault(section, {})[key.strip()] = _parse_value(value)


def load_run_config(path: Optional[Path] = None, overrides: Iterable[str] = ()) -> RunConfig:
    sections: Dict[str, Dict[str, Any]] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for name in parser.sections():
            if name not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{name}]")
            sections[name] = {k: _parse_value(v) for k, v in parser.items(name)}
        for name in sections:
            sections[name] = {k: v for k, v in sections[name].items() if v is not None}

    for ov in overrides:
        apply_override(sections, ov)
    try:
        return RunConfig.model_validate(_nested(sections))
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}") from None


def _render(value: Any) -> Optional[str]:
    if value is None:
        return None
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, dict)):
        return json.dumps(value)
    return str(value)


def config_sections(cfg: RunConfig) -> Dict[str, Dict[str, Any]]:
    dumped = cfg.model_dump(mode="json", by_alias=True)
    train = dict(dumped["train"])
    hyper = train.pop("hyper")
    return {
        "run": {"command": dumped["command"], "seed": dumped["seed"], "output_dir": dumped["output_dir"]},
        "hyper": hyper,
        "train": train,
        **{name: dumped[name] for name in _FLAT_SECTIONS},
    }


def write_effective_config(cfg: RunConfig, output_dir: Optional[Path] = None) -> Path:
    out = Path(output_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser(interpolation=None)
    for name, values in config_sections(cfg).items():
        parser[name] = {k: r for k, r in ((k, _render(v)) for k, v in values.items()) if r is not None}
    path = out / EFFECTIVE_CONFIG
    with open(path, "w", encoding="utf-8") as f:
        parser.write(f)
    return path

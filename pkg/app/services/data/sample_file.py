# app/services/data/sample_file.py
"""
sample ファイル（JSON lines）

1行目: {"format": "mimn-samples", "version": 1, "vocabulary": {...}, "count": N}
2行目以降: {"u": user_id, "h": [[item, category], ...], "t": [item, category], "y": label, "ts": target_timestamp}
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import List, Sequence, Tuple

from app.core.errors import DataError
from app.services.data.types import Sample
from app.services.data.vocab import Vocabulary

FORMAT_NAME = "mimn-samples"
FORMAT_VERSION = 1


def write_samples(path: Path, samples: Sequence[Sample], vocab: Vocabulary) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "count": len(samples),
        "vocabulary": vocab.to_header(),
    }
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(header, ensure_ascii=False, separators=(",", ":")) + "\n")
        for s in samples:
            rec = {
                "u": s.user_id,
                "h": [list(p) for p in s.history],
                "t": list(s.target),
                "y": s.label,
                "ts": s.target_timestamp,
            }
            f.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")
    return path


def read_samples(path: Path) -> Tuple[List[Sample], Vocabulary]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"sample file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
        try:
            header = json.loads(first)
        except ValueError:
            raise DataError(f"{path}: missing sample-file header") from None
        if header.get("format") != FORMAT_NAME:
            raise DataError(f"{path}: not a sample file (format={header.get('format')!r})")
        if header.get("version") != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported sample-file version {header.get('version')}")
        vocab = Vocabulary.from_header(header.get("vocabulary") or {})

        samples: List[Sample] = []
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                samples.append(
                    Sample(
                        user_id=rec["u"],
                        history=tuple((str(i), str(c)) for i, c in rec["h"]),
                        target=(str(rec["t"][0]), str(rec["t"][1])),
                        label=int(rec["y"]),
                        target_timestamp=int(rec.get("ts", 0)),
                    )
                )
            except (ValueError, KeyError, TypeError, IndexError) as e:
                raise DataError(f"{path}:{lineno}: bad sample record ({e})") from None

    if header.get("count") is not None and header["count"] != len(samples):
        raise DataError(f"{path}: header count {header['count']} != records {len(samples)}")
    return samples, vocab

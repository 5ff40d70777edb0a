"""On-disk formats: manifests, binary feature files, truth/label TSVs and trial lists."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

FEAT_MAGIC = b"FEAT"
_HEADER = struct.Struct("<4sII")

TARGET = "target"
NONTARGET = "nontarget"


class FormatError(ValueError):
    """Raised when an input file does not satisfy its format contract."""


@dataclass(frozen=True)
class ManifestEntry:
    utt_id: str
    group_id: str
    feature_path: str
    speaker_id: str | None = None


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def utt_ids(self) -> list[str]:
        return [e.utt_id for e in self.entries]

    def resolve(self, entry: ManifestEntry) -> Path:
        path = Path(entry.feature_path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path


@dataclass(frozen=True)
class Trial:
    label: str
    enroll_id: str
    test_id: str

    @property
    def is_target(self) -> bool:
        return self.label == TARGET


def read_manifest(path: str | Path) -> Manifest:
    """Parse a TSV manifest: ``utt_id  group_id  feature_path  [speaker_id]``.

    Relative feature paths are resolved against the manifest's directory.
    A ``-`` in the speaker column means unlabeled.
    """
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) not in (3, 4) or not all(fields):
                raise FormatError(
                    f"{path}:{lineno}: malformed manifest line "
                    f"(expected 3 or 4 tab-separated fields, got {len(fields)})"
                )
            utt, group, feat = fields[:3]
            spk = fields[3] if len(fields) == 4 and fields[3] != "-" else None
            if utt in seen:
                raise FormatError(f"{path}:{lineno}: duplicate utterance_id {utt!r}")
            seen.add(utt)
            entries.append(ManifestEntry(utt, group, feat, spk))
    if not entries:
        raise FormatError(f"{path}: empty manifest")
    return Manifest(entries, root=path.parent)


def write_manifest(manifest: Manifest | Iterable[ManifestEntry], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as f:
        for e in manifest:
            f.write(f"{e.utt_id}\t{e.group_id}\t{e.feature_path}\t{e.speaker_id or '-'}\n")


def check_features(m: np.ndarray) -> np.ndarray:
    """Validate a feature matrix and return it as C-contiguous float32."""
    m = np.asarray(m)
    if m.ndim != 2:
        raise FormatError(f"feature matrix must be 2-D, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise FormatError(f"feature matrix needs rows >= 1 and cols >= 1, got {m.shape}")
    m = np.ascontiguousarray(m, dtype=np.float32)
    if not np.isfinite(m).all():
        raise FormatError("feature matrix contains non-finite values")
    return m


def encode_features(m: np.ndarray) -> bytes:
    m = check_features(m)
    rows, cols = m.shape
    return _HEADER.pack(FEAT_MAGIC, rows, cols) + m.astype("<f4", copy=False).tobytes()


def decode_features(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"{source}: truncated header")
    magic, rows, cols = _HEADER.unpack_from(buf)
    if magic != FEAT_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}")
    if rows < 1 or cols < 1:
        raise FormatError(f"{source}: invalid shape {rows}x{cols}")
    expected = _HEADER.size + 4 * rows * cols
    if len(buf) < expected:
        raise FormatError(f"{source}: truncated payload")
    if len(buf) > expected:
        raise FormatError(f"{source}: trailing bytes after payload")
    m = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=_HEADER.size)
    m = m.reshape(rows, cols).astype(np.float32)
    if not np.isfinite(m).all():
        raise FormatError(f"{source}: non-finite values")
    return m


def write_features(m: np.ndarray, path: str | Path) -> None:
    Path(path).write_bytes(encode_features(m))


def read_features(path: str | Path) -> np.ndarray:
    return decode_features(Path(path).read_bytes(), source=str(path))


def load_features(manifest: Manifest) -> dict[str, np.ndarray]:
    """Read every feature file named by the manifest, keyed by utterance id."""
    return {e.utt_id: read_features(manifest.resolve(e)) for e in manifest}


def read_trials(path: str | Path) -> list[Trial]:
    path = Path(path)
    trials: list[Trial] = []
    with path.open("r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            fields = raw.split()
            if not fields:
                continue
            if len(fields) != 3:
                raise FormatError(f"{path}:{lineno}: expected '<0|1> <enroll> <test>'")
            tok, enroll, test = fields
            if tok not in ("0", "1"):
                raise FormatError(f"{path}:{lineno}: label must be 0 or 1, got {tok!r}")
            trials.append(Trial(TARGET if tok == "1" else NONTARGET, enroll, test))
    return trials


def write_trials(trials: Iterable[Trial], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for t in trials:
            f.write(f"{1 if t.is_target else 0} {t.enroll_id} {t.test_id}\n")


def read_label_tsv(path: str | Path) -> dict[str, str]:
    """Read ``utt_id \\t label`` lines (truth files and pseudo-label files)."""
    path = Path(path)
    out: dict[str, str] = {}
    with path.open("r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 2 or not all(fields):
                raise FormatError(f"{path}:{lineno}: expected 'utt_id<TAB>label'")
            if fields[0] in out:
                raise FormatError(f"{path}:{lineno}: duplicate utterance_id {fields[0]!r}")
            out[fields[0]] = fields[1]
    return out


def write_label_tsv(labels: Mapping[str, object], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as f:
        for utt, lab in labels.items():
            f.write(f"{utt}\t{lab}\n")


def write_json(obj, path: str | Path) -> None:
    """Write JSON with a stable key order so repeated runs are byte-identical."""
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))

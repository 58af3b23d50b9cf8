"""Synthetic Gleason-style cohorts: labeled patch dataset, WSI bags, splits, files.

A raw patch is an H x W grid of cells in R^D_raw. Every cell is a noisy copy
of one archetype vector: tumour archetypes (several per grade 3/4/5), benign
gland archetypes, or a stroma archetype shared by all classes. A grade-c patch
holds at least one grade-c cell and stroma elsewhere; a benign patch holds at
least one benign-gland cell. Slide composition and archetype geometry are
synthetic assumptions, not measured tissue statistics.
"""

from __future__ import annotations

import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .seeding import substream

CLASSES = (0, 3, 4, 5)
GRADES = (3, 4, 5)
STROMA = -1

# Gleason score frequencies (GS 6..10) of a public prostate biopsy cohort, spread evenly over
# the (primary, secondary) pairs that produce each score.
_GS_COUNTS = {6: 1192, 7: 1826, 8: 1173, 9: 1061, 10: 109}


def _default_grade_mix() -> dict[str, float]:
    pairs: dict[int, list[tuple[int, int]]] = {}
    for pg in GRADES:
        for sg in GRADES:
            pairs.setdefault(pg + sg, []).append((pg, sg))
    total = sum(_GS_COUNTS.values())
    mix = {}
    for gs, members in sorted(pairs.items()):
        for pg, sg in members:
            mix[f"{pg}+{sg}"] = _GS_COUNTS[gs] / total / len(members)
    return mix


def parse_pair(key: str) -> tuple[int, int]:
    try:
        pg, sg = (int(v) for v in key.split("+"))
    except ValueError:
        raise ConfigError(f"grade-mix key {key!r} is not of the form 'pg+sg'") from None
    if pg not in GRADES or sg not in GRADES:
        raise ConfigError(f"grade-mix key {key!r} uses a grade outside 3..5")
    return pg, sg


@dataclass
class CohortConfig:
    n_wsis: int = 400
    patches_per_wsi: int = 32
    grid_h: int = 4
    grid_w: int = 4
    d_raw: int = 16
    archetypes_per_grade: int = 4
    noise_sigma: float = 0.2
    grade_mix: dict[str, float] = field(default_factory=_default_grade_mix)
    benign_fraction: float = 0.30
    primary_share: float = 0.45 / 0.70
    pd_per_class: int = 500
    tumour_cell_fraction: float = 0.5
    benign_cell_fraction: float = 0.5
    archetype_scale: float = 0.6
    grade_separation: float = 1.0
    seed: int = 7

    def validate(self) -> None:
        for name in ("n_wsis", "patches_per_wsi", "grid_h", "grid_w", "d_raw", "archetypes_per_grade"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"cohort.{name} must be >= 1")
        if self.pd_per_class < 0:
            raise ConfigError("cohort.pd_per_class must be >= 0")
        if not self.noise_sigma >= 0:
            raise ConfigError("cohort.noise_sigma must be >= 0")
        if not 0 <= self.benign_fraction < 1:
            raise ConfigError("cohort.benign_fraction must lie in [0, 1)")
        if not 0.5 < self.primary_share < 1:
            raise ConfigError("cohort.primary_share must lie in (0.5, 1)")
        for name in ("tumour_cell_fraction", "benign_cell_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"cohort.{name} must lie in [0, 1]")
        if not self.grade_mix:
            raise ConfigError("cohort.grade_mix is empty")
        for key, p in self.grade_mix.items():
            parse_pair(key)
            if p < 0:
                raise ConfigError(f"grade-mix probability for {key} is negative")
        total = math.fsum(self.grade_mix.values())
        if abs(total - 1.0) > 1e-12:
            raise ConfigError(f"grade-mix probabilities sum to {total!r}, not 1")
        for key, p in self.grade_mix.items():
            pg, sg = parse_pair(key)
            if p > 0:
                bag_composition(self.patches_per_wsi, pg, sg, self.benign_fraction, self.primary_share)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> CohortConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown cohort config keys: {sorted(unknown)}")
        return cls(**data)


def bag_composition(l: int, pg: int, sg: int, benign_fraction: float, primary_share: float) -> dict[int, int]:
    """Patch counts per class for one slide; the primary grade is the majority."""
    n_benign = int(math.floor(benign_fraction * l + 0.5))
    n_tumour = l - n_benign
    if pg == sg:
        if n_tumour < 1:
            raise ConfigError(f"l={l} leaves no tumour patches at benign fraction {benign_fraction}")
        counts = {0: n_benign, pg: n_tumour}
    else:
        n_sg = max(1, int(math.floor((1 - primary_share) * n_tumour + 0.5)))
        n_pg = n_tumour - n_sg
        if n_pg <= n_sg:
            raise ConfigError(f"l={l} is too small to realise grades {pg}+{sg} with a primary majority")
        counts = {0: n_benign, pg: n_pg, sg: n_sg}
    return {c: n for c, n in counts.items() if n > 0}


def multilabel_target(pg: int, sg: int) -> np.ndarray:
    return np.array([1 if c in (pg, sg) else 0 for c in GRADES], dtype=np.int8)


@dataclass(eq=False)
class RawPatch:
    cells: np.ndarray  # (H, W, D_raw)
    grade: int
    cell_grades: np.ndarray  # (H, W); STROMA for background cells


@dataclass(eq=False)
class WsiBag:
    wsi_id: str
    patches: np.ndarray  # (l, H, W, D_raw)
    primary: int
    secondary: int
    patch_grades: np.ndarray | None = None  # (l,)
    cell_grades: np.ndarray | None = None  # (l, H, W)

    @property
    def target(self) -> np.ndarray:
        return multilabel_target(self.primary, self.secondary)

    @property
    def pair(self) -> tuple[int, int]:
        return self.primary, self.secondary

    def __len__(self) -> int:
        return self.patches.shape[0]

    def stripped(self) -> WsiBag:
        """Copy without patch- and cell-level ground truth, as trainers see it."""
        return WsiBag(self.wsi_id, self.patches, self.primary, self.secondary)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WsiBag):
            return NotImplemented
        return (
            self.wsi_id == other.wsi_id
            and self.pair == other.pair
            and _arr_eq(self.patches, other.patches)
            and _arr_eq(self.patch_grades, other.patch_grades)
            and _arr_eq(self.cell_grades, other.cell_grades)
        )


@dataclass(eq=False)
class PatchDataset:
    """Patch-level annotated set; ``patch_ids`` are stable across subsetting."""

    cells: np.ndarray  # (N, H, W, D_raw)
    grades: np.ndarray  # (N,)
    cell_grades: np.ndarray  # (N, H, W)
    patch_ids: np.ndarray  # (N,)
    source_wsi: list[str]  # "" for patches not taken from a bag
    source_index: np.ndarray  # (N,), -1 when not taken from a bag

    def __len__(self) -> int:
        return self.cells.shape[0]

    def __getitem__(self, i: int) -> RawPatch:
        return RawPatch(self.cells[i], int(self.grades[i]), self.cell_grades[i])

    def subset(self, keep: np.ndarray) -> PatchDataset:
        idx = np.flatnonzero(keep) if keep.dtype == bool else np.asarray(keep)
        return PatchDataset(
            self.cells[idx],
            self.grades[idx],
            self.cell_grades[idx],
            self.patch_ids[idx],
            [self.source_wsi[i] for i in idx],
            self.source_index[idx],
        )

    def class_counts(self) -> dict[int, int]:
        return {c: int(np.sum(self.grades == c)) for c in CLASSES}

    def __eq__(self, other) -> bool:
        if not isinstance(other, PatchDataset):
            return NotImplemented
        return (
            _arr_eq(self.cells, other.cells)
            and _arr_eq(self.grades, other.grades)
            and _arr_eq(self.cell_grades, other.cell_grades)
            and _arr_eq(self.patch_ids, other.patch_ids)
            and self.source_wsi == other.source_wsi
            and _arr_eq(self.source_index, other.source_index)
        )


@dataclass(eq=False)
class Cohort:
    config: CohortConfig
    patches: PatchDataset
    bags: list[WsiBag]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Cohort):
            return NotImplemented
        return self.config.to_dict() == other.config.to_dict() and self.patches == other.patches and self.bags == other.bags


def _arr_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and a.dtype == b.dtype and np.array_equal(a, b)


def make_archetypes(cfg: CohortConfig) -> tuple[dict[int, np.ndarray], np.ndarray]:
    """Archetype vectors per class plus the shared stroma vector.

    Grade centroids sit on a line (3 - 4 - 5) so neighbouring grades are the
    most confusable; benign and stroma centroids are drawn independently.
    """
    rng = substream(cfg.seed, "cohort", "archetypes")
    d, a = cfg.d_raw, cfg.archetypes_per_grade
    scale = cfg.archetype_scale

    def draw(n):
        return rng.standard_normal((n, d)) * scale

    stroma = draw(1)[0]
    benign_center = draw(1)[0]
    grade_origin = draw(1)[0]
    axis = rng.standard_normal(d)
    axis *= cfg.grade_separation * scale / np.linalg.norm(axis)
    centers = {0: benign_center, 3: grade_origin - axis, 4: grade_origin, 5: grade_origin + axis}
    archetypes = {c: centers[c] + 0.5 * draw(a) for c in CLASSES}
    return archetypes, stroma


def _make_patch(rng, cfg: CohortConfig, grade: int, archetypes, stroma) -> tuple[np.ndarray, np.ndarray]:
    h, w, d = cfg.grid_h, cfg.grid_w, cfg.d_raw
    r = h * w
    frac = cfg.benign_cell_fraction if grade == 0 else cfg.tumour_cell_fraction
    n_cls = 1 + rng.binomial(r - 1, frac)
    which = rng.integers(cfg.archetypes_per_grade)
    positions = rng.permutation(r)[:n_cls]
    cells = np.tile(stroma, (r, 1))
    labels = np.full(r, STROMA, dtype=np.int8)
    cells[positions] = archetypes[grade][which]
    labels[positions] = grade
    cells = cells + cfg.noise_sigma * rng.standard_normal((r, d))
    return cells.reshape(h, w, d), labels.reshape(h, w)


def generate_cohort(config: CohortConfig) -> Cohort:
    """Draw bags and the class-balanced labeled patch set; pure function of the config."""
    config.validate()
    cfg = config
    archetypes, stroma = make_archetypes(cfg)
    keys = sorted(cfg.grade_mix)
    probs = np.array([cfg.grade_mix[k] for k in keys])
    probs = probs / probs.sum()
    pair_rng = substream(cfg.seed, "cohort", "pairs")
    choice = pair_rng.choice(len(keys), size=cfg.n_wsis, p=probs)

    bags = []
    for n in range(cfg.n_wsis):
        pg, sg = parse_pair(keys[choice[n]])
        rng = substream(cfg.seed, "cohort", "bag", n)
        counts = bag_composition(cfg.patches_per_wsi, pg, sg, cfg.benign_fraction, cfg.primary_share)
        grades = np.concatenate([np.full(k, c, dtype=np.int8) for c, k in sorted(counts.items())])
        grades = grades[rng.permutation(grades.size)]
        cells, cell_labels = zip(*(_make_patch(rng, cfg, int(g), archetypes, stroma) for g in grades))
        bags.append(
            WsiBag(f"wsi-{n:05d}", np.stack(cells), pg, sg, grades, np.stack(cell_labels))
        )

    pd = _sample_patch_dataset(cfg, bags, archetypes, stroma)
    return Cohort(cfg, pd, bags)


def _sample_patch_dataset(cfg: CohortConfig, bags, archetypes, stroma) -> PatchDataset:
    rng = substream(cfg.seed, "cohort", "patch-dataset")
    pool = {c: [] for c in CLASSES}
    for bag in bags:
        for i, g in enumerate(bag.patch_grades):
            pool[int(g)].append((bag, i))
    cells, grades, cell_grades, src_wsi, src_idx = [], [], [], [], []
    for c in CLASSES:
        members = pool[c]
        take = min(cfg.pd_per_class, len(members))
        if c != 0 and take < cfg.pd_per_class:
            raise ConfigError(f"only {len(members)} grade-{c} patches in the bags; pd_per_class={cfg.pd_per_class}")
        for k in rng.permutation(len(members))[:take]:
            bag, i = members[k]
            cells.append(bag.patches[i])
            grades.append(c)
            cell_grades.append(bag.cell_grades[i])
            src_wsi.append(bag.wsi_id)
            src_idx.append(i)
        # top up benign from fresh draws when the bags are short of benign tissue
        for _ in range(cfg.pd_per_class - take):
            x, lab = _make_patch(rng, cfg, 0, archetypes, stroma)
            cells.append(x)
            grades.append(0)
            cell_grades.append(lab)
            src_wsi.append("")
            src_idx.append(-1)
    n = len(grades)
    shape = (0, cfg.grid_h, cfg.grid_w)
    return PatchDataset(
        np.stack(cells) if n else np.zeros(shape + (cfg.d_raw,)),
        np.array(grades, dtype=np.int8),
        np.stack(cell_grades) if n else np.zeros(shape, dtype=np.int8),
        np.arange(n, dtype=np.int64),
        src_wsi,
        np.array(src_idx, dtype=np.int64),
    )


@dataclass
class Split:
    train: list[WsiBag]
    val: list[WsiBag]
    test: list[WsiBag]
    stratified: bool = True
    warning: str | None = None

    def ids(self) -> dict[str, list[str]]:
        return {k: [b.wsi_id for b in getattr(self, k)] for k in ("train", "val", "test")}


def _cut_points(n: int, ratios: tuple[float, float, float]) -> tuple[int, int]:
    c1 = int(math.floor(n * ratios[0] + 0.5))
    c2 = int(math.floor(n * (ratios[0] + ratios[1]) + 0.5))
    return c1, c2


def split_cohort(bags: list[WsiBag], ratios=(0.7, 0.1, 0.2), seed: int = 0) -> Split:
    """Stratified train/val/test split over (primary, secondary) pairs.

    Each stratum is shuffled and cut at rounded cumulative boundaries, so every
    pair's share of each split is within one bag of proportional. If a stratum
    has fewer than 3 bags, or stratification would leave a split empty, the
    split falls back to one global shuffle and records a warning.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(not r > 0 for r in ratios):
        raise ConfigError("split ratios must be three positive numbers (val/test may not be zero)")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios sum to {sum(ratios)}, not 1")
    rng = substream(seed, "split")
    strata: dict[tuple[int, int], list[WsiBag]] = {}
    for bag in bags:
        strata.setdefault(bag.pair, []).append(bag)

    parts = ([], [], [])
    warning = None
    stratified = bool(strata) and min(len(v) for v in strata.values()) >= 3
    if stratified:
        for key in sorted(strata):
            members = strata[key]
            order = rng.permutation(len(members))
            c1, c2 = _cut_points(len(members), ratios)
            for rank, k in enumerate(order):
                parts[0 if rank < c1 else 1 if rank < c2 else 2].append(members[k])
        if any(not p for p in parts):
            stratified = False
            warning = "stratification left a split empty; fell back to a global shuffle"
    elif strata:
        warning = "a (primary, secondary) stratum has fewer than 3 bags; fell back to a global shuffle"
    if not stratified:
        parts = ([], [], [])
        order = rng.permutation(len(bags))
        c1, c2 = _cut_points(len(bags), ratios)
        for rank, k in enumerate(order):
            parts[0 if rank < c1 else 1 if rank < c2 else 2].append(bags[k])
    # keep generation order inside each split
    position = {id(b): i for i, b in enumerate(bags)}
    train, val, test = (sorted(p, key=lambda b: position[id(b)]) for p in parts)
    return Split(train, val, test, stratified, warning)


# ---------------------------------------------------------------------------
# Cohort file
#
#   text header, one "key: value" per line, terminated by "end-header\n":
#     ADAPT-COHORT / format-version / seed / config (JSON) / patch-records / bag-records
#   then patch-records + bag-records binary records, each
#     u64 payload length | payload
#   patch payload: u8 kind=1 | i64 patch_id | i8 grade | u32 len + utf-8 source wsi id |
#     i64 source index | u32 H | u32 W | u32 D | f64[H*W*D] cells | i8[H*W] cell grades
#   bag payload: u8 kind=2 | u32 len + utf-8 wsi id | i8 primary | i8 secondary |
#     u32 l | u32 H | u32 W | u32 D | i8[3] target | f64[l*H*W*D] patches |
#     u8 has-labels | i8[l] patch grades | i8[l*H*W] cell grades   (labels only when has-labels=1)
#   All integers and floats little-endian.
# ---------------------------------------------------------------------------

MAGIC = "ADAPT-COHORT"
FORMAT_VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _patch_payload(pd: PatchDataset, i: int) -> bytes:
    h, w, d = pd.cells.shape[1:]
    return b"".join(
        [
            struct.pack("<Bqb", 1, int(pd.patch_ids[i]), int(pd.grades[i])),
            _pack_str(pd.source_wsi[i]),
            struct.pack("<qIII", int(pd.source_index[i]), h, w, d),
            np.ascontiguousarray(pd.cells[i], dtype="<f8").tobytes(),
            np.ascontiguousarray(pd.cell_grades[i], dtype="i1").tobytes(),
        ]
    )


def _bag_payload(bag: WsiBag) -> bytes:
    l, h, w, d = bag.patches.shape
    labeled = bag.patch_grades is not None and bag.cell_grades is not None
    chunks = [
        struct.pack("<B", 2),
        _pack_str(bag.wsi_id),
        struct.pack("<bbIIII", bag.primary, bag.secondary, l, h, w, d),
        bag.target.astype("i1").tobytes(),
        np.ascontiguousarray(bag.patches, dtype="<f8").tobytes(),
        struct.pack("<B", 1 if labeled else 0),
    ]
    if labeled:
        chunks.append(np.ascontiguousarray(bag.patch_grades, dtype="i1").tobytes())
        chunks.append(np.ascontiguousarray(bag.cell_grades, dtype="i1").tobytes())
    return b"".join(chunks)


def cohort_bytes(cohort: Cohort) -> bytes:
    cfg = cohort.config
    header = "".join(
        [
            f"{MAGIC}\n",
            f"format-version: {FORMAT_VERSION}\n",
            f"seed: {cfg.seed}\n",
            f"config: {json.dumps(cfg.to_dict(), sort_keys=True)}\n",
            f"patch-records: {len(cohort.patches)}\n",
            f"bag-records: {len(cohort.bags)}\n",
            "end-header\n",
        ]
    )
    out = io.BytesIO()
    out.write(header.encode("utf-8"))
    payloads = [_patch_payload(cohort.patches, i) for i in range(len(cohort.patches))]
    payloads += [_bag_payload(b) for b in cohort.bags]
    for p in payloads:
        out.write(struct.pack("<Q", len(p)))
        out.write(p)
    return out.getvalue()


def save_cohort(path, cohort: Cohort) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(cohort_bytes(cohort))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes, pos: int):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("file is truncated", self.pos)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self, dtype: str, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        itemsize = np.dtype(dtype).itemsize
        raw = self.take(n * itemsize)
        return np.frombuffer(raw, dtype=dtype).astype(dtype[-2:] if dtype.startswith("<") else dtype).reshape(shape)


def _parse_header(buf: bytes) -> tuple[dict[str, str], int]:
    fields: dict[str, str] = {}
    pos = 0
    first = True
    while True:
        end = buf.find(b"\n", pos)
        if end < 0:
            raise FormatError("header is not terminated", pos)
        line = buf[pos:end].decode("utf-8", errors="replace")
        if first:
            if line != MAGIC:
                raise FormatError(f"bad magic header {line[:32]!r}", 0)
            first = False
        elif line == "end-header":
            return fields, end + 1
        else:
            key, sep, value = line.partition(": ")
            if not sep:
                raise FormatError(f"malformed header line {line[:40]!r}", pos)
            fields[key] = value
        pos = end + 1


def load_cohort(path) -> Cohort:
    buf = Path(path).read_bytes()
    fields, pos = _parse_header(buf)
    try:
        version = int(fields["format-version"])
        cfg = CohortConfig.from_dict(json.loads(fields["config"]))
        n_patch = int(fields["patch-records"])
        n_bag = int(fields["bag-records"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"incomplete or invalid header: {exc}", 0) from None
    if version != FORMAT_VERSION:
        raise FormatError(f"format-version {version} is not supported (expected {FORMAT_VERSION})", 0)
    rd = _Reader(buf, pos)

    ids, grades, src_wsi, src_idx, cells, cell_grades = [], [], [], [], [], []
    bags = []
    for k in range(n_patch + n_bag):
        start = rd.pos
        (length,) = rd.unpack("<Q")
        body = _Reader(rd.take(length), 0)
        try:
            (kind,) = body.unpack("<B")
            if k < n_patch:
                if kind != 1:
                    raise FormatError(f"expected a patch record, found kind {kind}", start)
                pid, grade = body.unpack("<qb")
                wsi = body.string()
                sidx, h, w, d = body.unpack("<qIII")
                ids.append(pid)
                grades.append(grade)
                src_wsi.append(wsi)
                src_idx.append(sidx)
                cells.append(body.array("<f8", (h, w, d)))
                cell_grades.append(body.array("i1", (h, w)))
            else:
                if kind != 2:
                    raise FormatError(f"expected a bag record, found kind {kind}", start)
                wsi = body.string()
                pg, sg, l, h, w, d = body.unpack("<bbIIII")
                body.take(3)
                patches = body.array("<f8", (l, h, w, d))
                (labeled,) = body.unpack("<B")
                pgr = cgr = None
                if labeled:
                    pgr = body.array("i1", (l,))
                    cgr = body.array("i1", (l, h, w))
                bags.append(WsiBag(wsi, patches, pg, sg, pgr, cgr))
        except FormatError as exc:
            if exc.offset is None or exc.offset < start:
                raise FormatError(f"record {k} is corrupt", start) from None
            raise
        if body.pos != length:
            raise FormatError(f"record {k} has {length - body.pos} trailing bytes", start)
    if rd.pos != len(buf):
        raise FormatError("unexpected data after the last record", rd.pos)

    shape = (0, cfg.grid_h, cfg.grid_w)
    pd = PatchDataset(
        np.stack(cells) if cells else np.zeros(shape + (cfg.d_raw,)),
        np.array(grades, dtype=np.int8),
        np.stack(cell_grades) if cell_grades else np.zeros(shape, dtype=np.int8),
        np.array(ids, dtype=np.int64),
        src_wsi,
        np.array(src_idx, dtype=np.int64),
    )
    return Cohort(cfg, pd, bags)

"""Model archives (JSON manifest + binary tensor blob) and CSV metrics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .dan import AlphaSelector, Architecture, ControllerModule, DanNetwork, Task, TaskLayer
from .layers import BatchNormBank, BNParams, Head
from .tensor import FilterBank, Tensor

FORMAT_VERSION = 1
BLOB_MAGIC = b"DANW"
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "tensors.bin"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ArchiveError(Exception):
    code = 10


class BadMagic(ArchiveError):
    code = 11


class VersionMismatch(ArchiveError):
    code = 12


class TruncatedBlob(ArchiveError):
    code = 13


class ManifestMismatch(ArchiveError):
    code = 14


# --------------------------------------------------------------------------
# tensor blob

def write_blob(tensors: dict[str, np.ndarray], f) -> None:
    f.write(BLOB_MAGIC)
    f.write(struct.pack("<I", FORMAT_VERSION))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<BB", 1, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_blob(raw: bytes) -> dict[str, np.ndarray]:
    if raw[:4] != BLOB_MAGIC:
        raise BadMagic("bad magic: not a DANW tensor blob")
    if len(raw) < 8:
        raise TruncatedBlob("blob ends inside its header")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"blob version {version}, expected {FORMAT_VERSION}")
    out: dict[str, np.ndarray] = {}
    off, n = 8, len(raw)

    def need(k):
        if off + k > n:
            raise TruncatedBlob(f"blob truncated at byte {off}")

    while off < n:
        need(2)
        (ln,) = struct.unpack_from("<H", raw, off)
        off += 2
        need(ln + 2)
        name = raw[off:off + ln].decode("utf-8")
        off += ln
        tag, ndim = struct.unpack_from("<BB", raw, off)
        off += 2
        if tag not in DTYPES:
            raise ArchiveError(f"tensor {name!r}: unknown dtype tag {tag}")
        need(4 * ndim)
        dims = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        dt = DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        need(nbytes)
        out[name] = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=off).astype(np.float64).reshape(dims)
        off += nbytes
    return out


# --------------------------------------------------------------------------
# manifest

def build_manifest(net: DanNetwork) -> dict:
    tasks = []
    for tk in net.tasks:
        layers = []
        for tl in tk.layers:
            d = {"kind": tl.kind}
            if tl.controller is not None:
                d.update(controller_mode=tl.controller.mode, frozen=tl.controller.frozen)
            elif tl.filters is not None:
                d.update(frozen=tl.filters.frozen)
            layers.append(d)
        tasks.append({"name": tk.name, "n_classes": tk.n_classes, "mode": tk.mode, "init": tk.init,
                      "head_sizes": tk.head.sizes, "head_frozen": tk.head.frozen, "layers": layers})
    return {
        "format": "danlab-model",
        "format_version": FORMAT_VERSION,
        "architecture": net.arch.to_dict(),
        "base_frozen": [fb.frozen for fb in net.base],
        "bn": [None if b is None else {"channels": b.channels, "frozen": [p.frozen for p in b.params]}
               for b in net.bn],
        "tasks": tasks,
        "alpha": {"alphas": [float(a) for a in net.alpha.alphas], "binding": net.alpha.binding},
        "tensors": list(net.named_tensors()),
    }


def expected_tensor_names(manifest: dict) -> list[str]:
    """Walk the architecture described by a manifest and list the tensors it must carry."""
    arch = Architecture.from_dict(manifest["architecture"])
    names = []
    for l in range(len(arch.convs)):
        names += [f"base.conv{l}.weight", f"base.conv{l}.bias"]
    for t, tk in enumerate(manifest["tasks"]):
        for l, layer in enumerate(tk["layers"]):
            if layer["kind"] == "controller":
                names += [f"task{t}.conv{l}.W", f"task{t}.conv{l}.b"]
            elif layer["kind"] == "own":
                names += [f"task{t}.conv{l}.weight", f"task{t}.conv{l}.bias"]
        for i in range(len(tk["head_sizes"]) - 1):
            names += [f"task{t}.head.fc{i}.weight", f"task{t}.head.fc{i}.bias"]
    for l, bn in enumerate(manifest["bn"]):
        if bn is None:
            continue
        for t in range(len(bn["frozen"])):
            names += [f"bn{l}.task{t}.{k}" for k in ("gamma", "beta", "running_mean", "running_var")]
    return names


def check_manifest(manifest: dict) -> None:
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"manifest version {manifest.get('format_version')}, expected {FORMAT_VERSION}")
    n_layers = len(manifest["architecture"]["convs"])
    n_tasks = len(manifest["tasks"])
    for tk in manifest["tasks"]:
        if len(tk["layers"]) != n_layers:
            raise ManifestMismatch(f"task {tk['name']!r} binds {len(tk['layers'])} of {n_layers} conv layers")
    if manifest["tasks"] and any(l["kind"] != "base" for l in manifest["tasks"][0]["layers"]):
        raise ManifestMismatch("task 0 must be the base network")
    for bn in manifest["bn"]:
        if bn is not None and len(bn["frozen"]) != n_tasks:
            raise ManifestMismatch("batch-norm bank count differs from task count")
    if len(manifest["alpha"]["alphas"]) != n_tasks:
        raise ManifestMismatch("alpha length differs from task count")


# --------------------------------------------------------------------------
# save / load

def save_model(net: DanNetwork, path) -> Path:
    """Write ``path/manifest.json`` and ``path/tensors.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    write_blob(net.named_tensors(), buf)
    blob = buf.getvalue()
    manifest = build_manifest(net)
    manifest["blob"] = BLOB_NAME
    manifest["blob_sha256"] = hashlib.sha256(blob).hexdigest()
    (path / BLOB_NAME).write_bytes(blob)
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> dict:
    try:
        return json.loads((Path(path) / MANIFEST_NAME).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ArchiveError(f"unreadable manifest: {e}") from None


def load_model(path) -> DanNetwork:
    path = Path(path)
    manifest = load_manifest(path)
    check_manifest(manifest)
    tensors = read_blob((path / manifest.get("blob", BLOB_NAME)).read_bytes())
    expected = expected_tensor_names(manifest)
    if set(tensors) != set(expected):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise ManifestMismatch(f"blob/manifest disagree; missing={missing[:5]} extra={extra[:5]}")

    arch = Architecture.from_dict(manifest["architecture"])

    def T(name):
        return Tensor(tensors[name].copy())

    base = [FilterBank(T(f"base.conv{l}.weight"), T(f"base.conv{l}.bias"), frozen=fz)
            for l, fz in enumerate(manifest["base_frozen"])]

    def head(t, tk):
        n = len(tk["head_sizes"]) - 1
        return Head([T(f"task{t}.head.fc{i}.weight") for i in range(n)],
                    [T(f"task{t}.head.fc{i}.bias") for i in range(n)], frozen=tk["head_frozen"])

    bn = []
    for l, spec in enumerate(manifest["bn"]):
        if spec is None:
            bn.append(None)
            continue
        bank = BatchNormBank(spec["channels"])
        bank.params = []
        for t, fz in enumerate(spec["frozen"]):
            p = BNParams(T(f"bn{l}.task{t}.gamma"), T(f"bn{l}.task{t}.beta"),
                         tensors[f"bn{l}.task{t}.running_mean"].copy(), tensors[f"bn{l}.task{t}.running_var"].copy())
            p.freeze(fz)
            bank.params.append(p)
        bn.append(bank)

    tasks = manifest["tasks"]
    net = DanNetwork(arch, base, head(0, tasks[0]), bn=bn, base_name=tasks[0]["name"])
    for t, tk in enumerate(tasks[1:], start=1):
        layers = []
        for l, layer in enumerate(tk["layers"]):
            if layer["kind"] == "controller":
                c = ControllerModule(tensors[f"task{t}.conv{l}.W"], tensors[f"task{t}.conv{l}.b"],
                                     mode=layer["controller_mode"], layer_ref=l)
                c.freeze(layer["frozen"])
                layers.append(TaskLayer("controller", controller=c))
            elif layer["kind"] == "own":
                fb = FilterBank(T(f"task{t}.conv{l}.weight"), T(f"task{t}.conv{l}.bias"), frozen=layer["frozen"])
                layers.append(TaskLayer("own", filters=fb))
            else:
                layers.append(TaskLayer("base"))
        net.tasks.append(Task(tk["name"], tk["n_classes"], tk["mode"], layers, head(t, tk), tk.get("init", "")))
    net.tasks[0].mode = tasks[0]["mode"]
    net.alpha = AlphaSelector(np.array(manifest["alpha"]["alphas"], dtype=np.float64), manifest["alpha"]["binding"])
    return net


# --------------------------------------------------------------------------
# metrics

def emit_metrics(rows, path, fields: list[str] | None = None) -> Path:
    """CSV with a header row and one record per row; UTF-8, LF line endings."""
    rows = list(rows)
    if fields is None:
        if not rows:
            raise ValueError("field names are required for an empty table")
        fields = list(rows[0])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r[k]) for k in fields})
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _parse(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(f)]

"""Config-driven orchestration of the two-stage synthesis pipeline.

Every command follows the same order: resolve inputs, validate them (config,
manifest kinds, checkpoint compatibility, output clobbering), and only then
compute and write. Artifacts carry the hash of the resolved config; nothing
written depends on wall-clock time or absolute paths, so reruns with the same
config and seed are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import shutil
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import data, metrics, nn, segmenter, stage1, stage2
from .data import PairedSample, ToyGenConfig
from .errors import ConfigError, ManifestError, OutputExistsError
from .optim import TrainConfig, total_steps
from .rng import derive_seed
from .segmenter import UnetSpec

log = logging.getLogger(__name__)

CONFIG_DIR = Path(__file__).parent / "configs"
MODES = ("dual", "single-baseline")
MASK_INPUTS = ("soft", "binary")
# TrainConfig keys a stage section may set; image_size and seed are global
STAGE_TRAIN_KEYS = ("batch_size", "epochs", "lr", "beta1", "beta2", "d_steps_per_g_step", "lambda_l1",
                    "noise_dim")


# -- configuration -----------------------------------------------------------------------

@dataclass
class DataSettings:
    family: str = "vessel-tree"
    count: int | None = None
    noise: float = 0.02
    train_fraction: float = 2 / 3


@dataclass
class Stage1Settings:
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=300))
    g_base: int = 32
    d_base: int = 16
    head: str = "linear"
    d_first_bn: bool = False
    instance_noise: float = 0.1
    saturating: bool = False


@dataclass
class Stage2Settings:
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=40))
    base_channels: int = 16
    depth: int = 3
    dropout_rate: float = 0.5


@dataclass
class UnetSettings:
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=40, batch_size=8, lr=2e-3, beta1=0.9))
    depth: int = 3
    base_channels: int = 16
    threshold: float = 0.5


@dataclass
class SynthSettings:
    count: int = 50
    mask_input: str = "soft"
    stochastic: bool = True
    keep_largest_component: bool = False


@dataclass
class EvalSettings:
    bins: int = 256
    memorization_count: int = 200


@dataclass
class BaselineSettings:
    train: TrainConfig = field(default_factory=TrainConfig)
    epochs: int | None = None  # None: match the dual pipeline's generator step budget
    g_base: int = 32
    d_base: int = 16
    head: str = "linear"
    d_first_bn: bool = False
    instance_noise: float = 0.1
    count: int | None = None  # None: same as synthesize.count


SECTIONS = {"data": DataSettings, "stage1": Stage1Settings, "stage2": Stage2Settings, "unet": UnetSettings,
            "synthesize": SynthSettings, "evaluate": EvalSettings, "baseline": BaselineSettings}


@dataclass
class PipelineConfig:
    seed: int = 0
    image_size: int = 32
    mode: str = "dual"
    workdir: str = "run"
    data: DataSettings = field(default_factory=DataSettings)
    stage1: Stage1Settings = field(default_factory=Stage1Settings)
    stage2: Stage2Settings = field(default_factory=Stage2Settings)
    unet: UnetSettings = field(default_factory=UnetSettings)
    synthesize: SynthSettings = field(default_factory=SynthSettings)
    evaluate: EvalSettings = field(default_factory=EvalSettings)
    baseline: BaselineSettings = field(default_factory=BaselineSettings)

    # derived views -----------------------------------------------------------------------

    def toy(self) -> ToyGenConfig:
        return ToyGenConfig(self.data.family, self.image_size, self.data.count, self.seed, self.data.noise)

    def train_config(self, section: str) -> TrainConfig:
        """The section's TrainConfig with the global image size and a labelled subseed."""
        base = getattr(self, section).train
        return replace(base, image_size=self.image_size, seed=derive_seed(self.seed, section)).validate()

    def unet_spec(self) -> UnetSpec:
        return UnetSpec(depth=self.unet.depth, base_channels=self.unet.base_channels)

    # serialization -----------------------------------------------------------------------

    def to_dict(self) -> dict:
        out = {"seed": self.seed, "image_size": self.image_size, "mode": self.mode, "workdir": self.workdir}
        for name in SECTIONS:
            section = asdict(getattr(self, name))
            train = section.pop("train", None)
            if train is not None:
                # a section's own field (baseline.epochs) shadows the TrainConfig key
                section.update({k: train[k] for k in STAGE_TRAIN_KEYS if k not in section})
            out[name] = section
        return out

    def config_hash(self) -> str:
        """sha256 of the canonical resolved config, excluding where outputs go."""
        d = self.to_dict()
        d.pop("workdir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        top = {f.name for f in fields(cls)} - set(SECTIONS)
        unknown = set(d) - top - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        kwargs = {k: d[k] for k in top if k in d}
        for name, klass in SECTIONS.items():
            kwargs[name] = _section(name, klass, d.get(name, {}))
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> "PipelineConfig":
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.toy()
        for name in ("stage1", "stage2", "unet", "baseline"):
            try:
                self.train_config(name)
            except ConfigError as exc:
                raise ConfigError(f"[{name}] {exc}") from None
        if not 0 < self.data.train_fraction < 1:
            raise ConfigError("data.train_fraction must lie in (0, 1)")
        for name in ("stage1", "baseline"):
            s = getattr(self, name)
            if s.head not in ("linear", "conv"):
                raise ConfigError(f"{name}.head must be 'linear' or 'conv'")
            if s.instance_noise < 0 or s.g_base < 1 or s.d_base < 1:
                raise ConfigError(f"{name}: channel widths must be >= 1 and instance_noise >= 0")
        if self.image_size % 2 ** self.stage2.depth or self.image_size % 2 ** self.unet.depth:
            raise ConfigError(f"image_size {self.image_size} not divisible by 2**depth of stage2/unet")
        if not 0 <= self.stage2.dropout_rate < 1:
            raise ConfigError("stage2.dropout_rate must lie in [0, 1)")
        if self.synthesize.mask_input not in MASK_INPUTS:
            raise ConfigError(f"synthesize.mask_input must be one of {MASK_INPUTS}")
        if self.synthesize.count < 1 or self.evaluate.memorization_count < 1 or self.evaluate.bins < 1:
            raise ConfigError("counts and bins must be >= 1")
        if self.baseline.epochs is not None and self.baseline.epochs < 0:
            raise ConfigError("baseline.epochs must be >= 0")
        if not 0 <= self.unet.threshold <= 1:
            raise ConfigError("unet.threshold must lie in [0, 1]")
        return self


def _section(name: str, klass, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"[{name}] must be a table")
    own = {f.name for f in fields(klass)} - {"train"}
    train_keys = set(STAGE_TRAIN_KEYS) - own if "train" in {f.name for f in fields(klass)} else set()
    unknown = set(values) - own - train_keys
    if unknown:
        raise ConfigError(f"unknown keys in [{name}]: {', '.join(sorted(unknown))}")
    kwargs = {k: v for k, v in values.items() if k in own}
    obj = klass(**kwargs)
    if train_keys:
        train = {k: v for k, v in values.items() if k in train_keys}
        obj.train = replace(obj.train, **train)
    return obj


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` (or ``key=value``) strings to a raw config dict."""
    d = json.loads(json.dumps(d))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) > 2 or not all(parts):
            raise ConfigError(f"override key {key!r} must be 'key' or 'section.key'")
        target = d
        if len(parts) == 2:
            target = d.setdefault(parts[0], {})
        target[parts[-1]] = _parse_value(value.strip())
    return d


def load_config(path=None, overrides: list[str] | None = None) -> PipelineConfig:
    """Read a TOML config (shipped name or path) and apply overrides."""
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists() and (CONFIG_DIR / f"{path}.toml").exists():
            p = CONFIG_DIR / f"{path}.toml"
        try:
            raw = tomllib.loads(p.read_text())
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {p}: {exc}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    return PipelineConfig.from_dict(apply_overrides(raw, overrides or []))


def shipped_configs() -> list[str]:
    return sorted(p.stem for p in CONFIG_DIR.glob("*.toml"))


# -- filesystem helpers ------------------------------------------------------------------------

class Layout:
    """Default artifact locations under a workdir."""

    def __init__(self, workdir):
        self.root = Path(workdir)

    data = property(lambda self: self.root / "data")
    real_manifest = property(lambda self: self.root / "data" / "manifest.jsonl")
    mask_manifest = property(lambda self: self.root / "data" / "masks.jsonl")
    stage1 = property(lambda self: self.root / "stage1")
    stage2 = property(lambda self: self.root / "stage2")
    synthetic = property(lambda self: self.root / "synthetic")
    synthetic_manifest = property(lambda self: self.root / "synthetic" / "manifest.jsonl")
    unet_real = property(lambda self: self.root / "unet-real")
    unet_synthetic = property(lambda self: self.root / "unet-synthetic")
    report = property(lambda self: self.root / "report")
    baseline = property(lambda self: self.root / "baseline")


def claim_output(out: Path, produces: list[str], force: bool) -> None:
    """Refuse to overwrite ``produces`` under ``out`` unless ``force``; with it, clear them."""
    existing = [name for name in produces if (out / name).exists()]
    if existing and not force:
        raise OutputExistsError(f"{out} already holds {', '.join(existing)}; pass --force to overwrite")
    for name in existing:
        target = out / name
        if target.is_dir():
            shutil.rmtree(target)
        else:
            target.unlink()


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _history_csv(history: dict) -> str:
    cols = ["d_loss", "g_loss"] if "d_loss" in history else ["loss"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", *cols])
    for i in range(len(history[cols[0]])):
        writer.writerow([i + 1, *(repr(float(history[c][i])) for c in cols)])
    return buf.getvalue()


def _save_store(store: nn.ParameterStore, path: Path, config_hash: str) -> None:
    store.meta["config_hash"] = config_hash
    nn.save_checkpoint(store, path)


def _load_manifest(path, kind: str, command: str) -> data.DatasetManifest:
    manifest = data.load_manifest(path, check_files=False)
    if manifest.kind != kind:
        raise ConfigError(f"{command} needs a {kind} manifest, {path} is {manifest.kind}")
    missing = manifest.missing_files()
    if missing:
        raise data.MissingFilesError(missing)
    return manifest


def _check_size(what: str, size, expected: int) -> None:
    if size is not None and int(size) != expected:
        raise ConfigError(f"{what} has image_size {size}, expected {expected}")


def _load_ckpt(path, kind: str, image_size: int) -> nn.ParameterStore:
    store = nn.load_checkpoint(path)
    if store.network_kind != kind:
        raise ConfigError(f"{path} holds a {store.network_kind}, expected a {kind}")
    _check_size(str(path), store.meta.get("image_size"), image_size)
    return store


def _train_split(manifest: data.DatasetManifest) -> str | None:
    return "train" if any(r.split == "train" for r in manifest.records) else None


def keep_largest_component(mask: np.ndarray) -> np.ndarray:
    """Binary (1, H, W) mask reduced to its largest 8-connected component."""
    labels, n = ndimage.label(mask[0] > 0.5, structure=data.EIGHT_CONNECTED)
    if n <= 1:
        return (mask > 0.5).astype(np.float64)
    sizes = np.bincount(labels.ravel())[1:]
    return (labels == 1 + int(np.argmax(sizes))).astype(np.float64)[None]


def component_stats(masks) -> dict:
    counts = np.array([data.count_components(m) for m in masks])
    return {"single_component_fraction": float(np.mean(counts == 1)),
            "median_components": float(np.median(counts)), "max_components": int(counts.max())}


# -- commands ----------------------------------------------------------------------------------

def gen_toy(cfg: PipelineConfig, out=None, force: bool = False) -> dict:
    """Toy paired dataset with a seeded train/test split, plus a masks-only view of the train split."""
    out = Path(out or Layout(cfg.workdir).data)
    toy = cfg.toy()
    n_train = int(round(toy.count * cfg.data.train_fraction))
    if not 1 <= n_train <= toy.count - 1:
        raise ConfigError(f"cannot split {toy.count} samples with train_fraction {cfg.data.train_fraction}")
    claim_output(out, ["manifest.jsonl", "masks.jsonl", "masks", "photos", "summary.json"], force)

    samples = data.gen_toy_dataset(toy)
    h = cfg.config_hash()
    extra = {"image_size": cfg.image_size, "config_hash": h, "family": toy.family}
    manifest = data.write_dataset(samples, out, "toy", extra)
    manifest = data.split_dataset(manifest, cfg.data.train_fraction, derive_seed(cfg.seed, "split"))
    manifest.save(out / "manifest.jsonl")
    train = manifest.subset("train")
    masks_only = data.DatasetManifest([replace(r, photo=None) for r in train.records], "masks-only", "toy",
                                      out, extra)
    masks_only.save(out / "masks.jsonl")
    summary = {"command": "gen-toy", "config_hash": h, "family": toy.family, "pairs": len(samples),
               "train": len(train), "test": len(manifest) - len(train), "image_size": cfg.image_size}
    _write_json(out / "summary.json", summary)
    log.info("wrote %d %s pairs (%d train) to %s", len(samples), toy.family, len(train), out)
    return summary


def train_stage1_cmd(cfg: PipelineConfig, manifest=None, out=None, force: bool = False) -> dict:
    lay = Layout(cfg.workdir)
    manifest_path, out = Path(manifest or lay.mask_manifest), Path(out or lay.stage1)
    m = _load_manifest(manifest_path, "masks-only", "train-stage1")
    _check_size(str(manifest_path), m.extra.get("image_size"), cfg.image_size)
    tc = cfg.train_config("stage1")
    _, masks, _ = data.load_arrays(m, _train_split(m))
    if masks is None or len(masks) < tc.batch_size:
        raise ConfigError(f"train-stage1 needs at least batch_size={tc.batch_size} masks")
    _check_size(str(manifest_path), masks.shape[-1], cfg.image_size)
    claim_output(out, ["g1.ckpt", "d1.ckpt", "history.csv", "summary.json"], force)

    s = cfg.stage1
    log.info("stage1: %d masks, %d epochs", len(masks), tc.epochs)
    g, d, hist = stage1.train_gan(masks, tc, saturating=s.saturating, g_base=s.g_base, d_base=s.d_base,
                                  head=s.head, d_first_bn=s.d_first_bn, instance_noise=s.instance_noise,
                                  on_epoch=_progress("stage1", tc.epochs))
    return _finish_training(cfg, out, "train-stage1", {"g1.ckpt": g, "d1.ckpt": d}, hist, len(masks), tc)


def train_stage2_cmd(cfg: PipelineConfig, manifest=None, out=None, force: bool = False) -> dict:
    lay = Layout(cfg.workdir)
    manifest_path, out = Path(manifest or lay.real_manifest), Path(out or lay.stage2)
    m = _load_manifest(manifest_path, "paired", "train-stage2")
    _check_size(str(manifest_path), m.extra.get("image_size"), cfg.image_size)
    tc = cfg.train_config("stage2")
    _, masks, photos = data.load_arrays(m, _train_split(m))
    if masks is None or len(masks) < tc.batch_size:
        raise ConfigError(f"train-stage2 needs at least batch_size={tc.batch_size} pairs")
    claim_output(out, ["g2.ckpt", "d2.ckpt", "history.csv", "summary.json"], force)

    s = cfg.stage2
    log.info("stage2: %d pairs, %d epochs", len(masks), tc.epochs)
    g, d, hist = stage2.train_stage2(masks, photos, tc, s.base_channels, s.dropout_rate,
                                     on_epoch=_progress("stage2", tc.epochs), depth=s.depth)
    return _finish_training(cfg, out, "train-stage2", {"g2.ckpt": g, "d2.ckpt": d}, hist, len(masks), tc)


def train_unet_cmd(cfg: PipelineConfig, manifest=None, out=None, force: bool = False,
                   synthetic: bool = False) -> dict:
    lay = Layout(cfg.workdir)
    default_manifest = lay.synthetic_manifest if synthetic else lay.real_manifest
    default_out = lay.unet_synthetic if synthetic else lay.unet_real
    manifest_path, out = Path(manifest or default_manifest), Path(out or default_out)
    m = _load_manifest(manifest_path, "paired", "train-unet")
    _check_size(str(manifest_path), m.extra.get("image_size"), cfg.image_size)
    tc = cfg.train_config("unet")
    _, masks, photos = data.load_arrays(m, _train_split(m))
    if masks is None or len(masks) < tc.batch_size:
        raise ConfigError(f"train-unet needs at least batch_size={tc.batch_size} pairs")
    claim_output(out, ["unet.ckpt", "history.csv", "summary.json"], force)

    log.info("unet: %d pairs from %s, %d epochs", len(masks), manifest_path.name, tc.epochs)
    params, hist = segmenter.train_unet((photos, masks), tc, cfg.unet_spec(),
                                        on_epoch=_progress("unet", tc.epochs))
    summary = _finish_training(cfg, out, "train-unet", {"unet.ckpt": params}, hist, len(masks), tc)
    summary["provenance"] = m.provenance
    _write_json(out / "summary.json", summary)
    return summary


def _progress(name: str, epochs: int):
    step = max(epochs // 10, 1)

    def report(epoch, hist):
        if (epoch + 1) % step == 0 or epoch + 1 == epochs:
            last = {k: round(v[-1], 4) for k, v in hist.items()}
            log.info("%s epoch %d/%d %s", name, epoch + 1, epochs, last)
    return report


def _finish_training(cfg, out: Path, command: str, stores: dict, hist: dict, n_items: int,
                     tc: TrainConfig) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    for name, store in stores.items():
        _save_store(store, out / name, h)
    (out / "history.csv").write_text(_history_csv(hist))
    summary = {"command": command, "config_hash": h, "epochs": tc.epochs, "items": n_items,
               "steps": total_steps(n_items, tc), "image_size": cfg.image_size,
               "final": {k: v[-1] for k, v in hist.items() if v}}
    _write_json(out / "summary.json", summary)
    return summary


def synthesize_cmd(cfg: PipelineConfig, stage1_ckpt=None, stage2_ckpt=None, out=None, count: int | None = None,
                   force: bool = False) -> dict:
    """Stage-I masks translated by Stage-II into a synthetic paired dataset."""
    lay = Layout(cfg.workdir)
    p1 = Path(stage1_ckpt or lay.stage1 / "g1.ckpt")
    p2 = Path(stage2_ckpt or lay.stage2 / "g2.ckpt")
    out = Path(out or lay.synthetic)
    count = cfg.synthesize.count if count is None else count
    if count < 1:
        raise ConfigError("count must be >= 1")
    g1 = nn.load_checkpoint(p1)
    g2 = nn.load_checkpoint(p2)
    for path, store, kind in ((p1, g1, "stage1-generator"), (p2, g2, "stage2-generator")):
        if store.network_kind != kind:
            raise ConfigError(f"{path} holds a {store.network_kind}, expected a {kind}")
    s1, s2 = g1.meta.get("image_size"), g2.meta.get("image_size")
    if s1 != s2:
        raise ConfigError(f"incompatible checkpoints: stage1 image_size {s1} vs stage2 image_size {s2}")
    _check_size("checkpoints", s1, cfg.image_size)
    claim_output(out, ["manifest.jsonl", "masks", "photos", "summary.json"], force)

    s = cfg.synthesize
    soft = stage1.generate(g1, count, derive_seed(cfg.seed, "synthesize/masks"))
    hard = stage1.binarize(soft)
    if s.keep_largest_component:
        cleaned = np.stack([keep_largest_component(m) for m in hard])
        soft = soft * (1.0 - (hard - cleaned))
        hard = cleaned
    condition = soft if s.mask_input == "soft" else hard
    photos = stage2.translate(condition, g2, derive_seed(cfg.seed, "synthesize/photos"), s.stochastic)
    samples = [PairedSample(m, p, f"syn-{i:05d}") for i, (m, p) in enumerate(zip(hard, photos))]
    h = cfg.config_hash()
    manifest = data.write_dataset(samples, out, "synthetic", {"image_size": cfg.image_size, "config_hash": h})
    manifest.save(out / "manifest.jsonl")
    summary = {"command": "synthesize", "config_hash": h, "pairs": count, "mask_input": s.mask_input,
               "keep_largest_component": s.keep_largest_component, "foreground_fraction": float(hard.mean()),
               **component_stats(hard)}
    _write_json(out / "summary.json", summary)
    log.info("wrote %d synthetic pairs to %s", count, out)
    return summary


def evaluate_cmd(cfg: PipelineConfig, real=None, synthetic=None, unet_real=None, unet_synthetic=None,
                 stage1_ckpt=None, out=None, force: bool = False) -> dict:
    """F1 of both u-nets on the real test split, the KL pair, and the memorization audit."""
    lay = Layout(cfg.workdir)
    real_path = Path(real or lay.real_manifest)
    syn_path = Path(synthetic or lay.synthetic_manifest)
    ur_path = Path(unet_real or lay.unet_real / "unet.ckpt")
    us_path = Path(unet_synthetic or lay.unet_synthetic / "unet.ckpt")
    s1_path = Path(stage1_ckpt) if stage1_ckpt else lay.stage1 / "g1.ckpt"
    out = Path(out or lay.report)

    real_m = _load_manifest(real_path, "paired", "evaluate")
    syn_m = _load_manifest(syn_path, "paired", "evaluate")
    if not any(r.split == "test" for r in real_m.records):
        raise ManifestError(f"{real_path} has no test split to evaluate on")
    for path, m in ((real_path, real_m), (syn_path, syn_m)):
        _check_size(str(path), m.extra.get("image_size"), cfg.image_size)
    u_real = _load_ckpt(ur_path, "unet", cfg.image_size)
    u_syn = _load_ckpt(us_path, "unet", cfg.image_size)
    g1 = None
    if stage1_ckpt or s1_path.exists():
        g1 = _load_ckpt(s1_path, "stage1-generator", cfg.image_size)
    claim_output(out, ["report.json", "report.txt", "hist_real.csv", "hist_synthetic.csv"], force)

    _, test_masks, test_photos = data.load_arrays(real_m, "test")
    _, train_masks, _ = data.load_arrays(real_m, "train")
    _, _, real_photos = data.load_arrays(real_m)
    _, _, syn_photos = data.load_arrays(syn_m)
    _check_size("photos", real_photos.shape[-1], cfg.image_size)
    _check_size("synthetic photos", syn_photos.shape[-1], cfg.image_size)

    thr = cfg.unet.threshold
    f1 = {"f1_real_trained": metrics.mean_f1(segmenter.segment(test_photos, u_real, thr), test_masks),
          "f1_synthetic_trained": metrics.mean_f1(segmenter.segment(test_photos, u_syn, thr), test_masks)}
    memo, extra = None, {"config_hash": cfg.config_hash(), "image_size": cfg.image_size,
                         "n_real_test": len(test_masks)}
    if g1 is not None:
        gen = stage1.binarize(stage1.generate(g1, cfg.evaluate.memorization_count,
                                              derive_seed(cfg.seed, "evaluate/memorization")))
        memo = metrics.memorization_stats(list(gen), list(train_masks))
        extra["generated_masks"] = component_stats(gen)
    report = metrics.dataset_report(list(real_photos), list(syn_photos), derive_seed(cfg.seed, "kl-split"),
                                    cfg.evaluate.bins, f1, memo, extra)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    (out / "hist_real.csv").write_text(metrics.pixel_histogram(list(real_photos), cfg.evaluate.bins).to_csv())
    (out / "hist_synthetic.csv").write_text(metrics.pixel_histogram(list(syn_photos), cfg.evaluate.bins).to_csv())
    log.info("F1 real-trained %.4f, synthetic-trained %.4f; KL syn %.4g vs split %.4g",
             f1["f1_real_trained"], f1["f1_synthetic_trained"], report.kl_syn_vs_real, report.kl_real_split)
    return report.to_dict()


def baseline_budget(cfg: PipelineConfig, n_train: int) -> dict:
    """Epochs giving the single GAN as many generator updates as Stage-I and Stage-II together."""
    budget = total_steps(n_train, cfg.train_config("stage1")) + total_steps(n_train, cfg.train_config("stage2"))
    tc = cfg.train_config("baseline")
    per_epoch = n_train // tc.batch_size
    if per_epoch < 1:
        raise ConfigError(f"baseline batch_size {tc.batch_size} exceeds {n_train} training photos")
    epochs = cfg.baseline.epochs if cfg.baseline.epochs is not None else math.ceil(budget / per_epoch)
    return {"dual_steps": budget, "epochs": epochs, "steps": epochs * per_epoch}


def baseline_cmd(cfg: PipelineConfig, manifest=None, out=None, force: bool = False) -> dict:
    """One unconditional DCGAN trained straight on photos, evaluated with the same KL report."""
    lay = Layout(cfg.workdir)
    manifest_path, out = Path(manifest or lay.real_manifest), Path(out or lay.baseline)
    m = _load_manifest(manifest_path, "paired", "baseline-single-gan")
    _check_size(str(manifest_path), m.extra.get("image_size"), cfg.image_size)
    _, _, train_photos = data.load_arrays(m, _train_split(m))
    budget = baseline_budget(cfg, len(train_photos))
    claim_output(out, ["g.ckpt", "d.ckpt", "history.csv", "photos", "report.json", "report.txt",
                       "hist_baseline.csv", "summary.json"], force)

    s = cfg.baseline
    tc = replace(cfg.train_config("baseline"), epochs=budget["epochs"])
    log.info("single-GAN baseline: %d photos, %d epochs (%d steps)", len(train_photos), tc.epochs, budget["steps"])
    g, d, hist = stage1.train_gan(train_photos, tc, g_base=s.g_base, d_base=s.d_base, head=s.head,
                                  d_first_bn=s.d_first_bn, instance_noise=s.instance_noise,
                                  on_epoch=_progress("baseline", tc.epochs))
    count = s.count if s.count is not None else cfg.synthesize.count
    photos = stage1.generate(g, count, derive_seed(cfg.seed, "baseline/sample"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "photos").mkdir()
    for i, p in enumerate(photos):
        data.save_image(p, out / "photos" / f"single-{i:05d}.png")
    # score the photos as written to disk, like the dual pipeline's
    photos = np.stack([data.load_image(out / "photos" / f"single-{i:05d}.png") for i in range(count)])
    _, _, real_photos = data.load_arrays(m)
    h = cfg.config_hash()
    report = metrics.dataset_report(list(real_photos), list(photos), derive_seed(cfg.seed, "kl-split"),
                                    cfg.evaluate.bins, {}, None,
                                    {"config_hash": h, "image_size": cfg.image_size, "mode": "single-baseline"})
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    (out / "hist_baseline.csv").write_text(metrics.pixel_histogram(list(photos), cfg.evaluate.bins).to_csv())
    summary = _finish_training(cfg, out, "baseline-single-gan", {"g.ckpt": g, "d.ckpt": d}, hist,
                               len(train_photos), tc)
    summary.update({"dual_steps": budget["dual_steps"], "photos": count, "kl_vs_real": report.kl_syn_vs_real})
    _write_json(out / "summary.json", summary)
    return summary


def run_pipeline(cfg: PipelineConfig, force: bool = False) -> dict:
    """gen-toy, then either the dual pipeline through evaluate or the single-GAN baseline."""
    results = {"gen-toy": gen_toy(cfg, force=force)}
    if cfg.mode == "single-baseline":
        results["baseline-single-gan"] = baseline_cmd(cfg, force=force)
        return results
    results["train-stage1"] = train_stage1_cmd(cfg, force=force)
    results["train-stage2"] = train_stage2_cmd(cfg, force=force)
    results["synthesize"] = synthesize_cmd(cfg, force=force)
    results["train-unet-real"] = train_unet_cmd(cfg, force=force)
    results["train-unet-synthetic"] = train_unet_cmd(cfg, force=force, synthetic=True)
    results["evaluate"] = evaluate_cmd(cfg, force=force)
    return results

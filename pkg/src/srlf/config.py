"""Run configuration: one flat key-value file with dotted keys.

Format, one entry per line:

    # comment
    encoder.kind = synthetic
    model.branch_sizes = 512,256
    train.permute_views = true

Unknown keys are rejected. Values are typed per the registry below; lists are
comma-separated. Command-line flags override file values, and the effective
merged configuration is dumped next to every command's outputs so a run can
be reproduced from its own artifacts.
"""

from __future__ import annotations

from pathlib import Path

from . import manifest as mf
from .encoder import DEFAULT_MODEL_ID, KIND_PRETRAINED, KIND_SYNTHETIC
from .errors import ConfigError
from .evaluate import EXCLUDE_MODES, EXCLUDE_RETRAIN, PROTO_ALL, PROTOCOLS, EvalProtocol
from .filters import TIE_KEEP_CENTER, TIE_SMALLEST_INDEX, FilterConfig
from .net import ModelConfig
from .train import TrainConfig

_MISSING = object()


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "on", "yes", "1"):
        return True
    if lowered in ("false", "off", "no", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _parse_float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


# key -> (parser, default, help)
KEYS = {
    "dataset.root": (str, None, "dataset root directory (real data)"),
    "dataset.annotations": (str, None, "annotation CSV path"),
    "dataset.fold_file": (str, None, "participant_id,fold_index CSV (challenge folds)"),
    "dataset.sample_rate_hz": (float, 30.0, "frame sampling rate"),
    "dataset.phase": (str, "both", "both | unobstructed | obstructed"),
    "dataset.path_template": (str, mf.DEFAULT_PATH_TEMPLATE,
                              "video path template with {root},{participant},"
                              "{phase},{session},{view}"),
    "dataset.folds": (int, 7, "number of cross-validation folds k"),
    "synthetic.classes": (int, 16, "synthetic dataset: class count"),
    "synthetic.frames_per_class": (int, 200, "synthetic dataset: frames per class"),
    "synthetic.participants": (int, 10, "synthetic dataset: participant count"),
    "encoder.kind": (str, KIND_SYNTHETIC, "synthetic | pretrained_vl"),
    "encoder.model_id_or_path": (str, DEFAULT_MODEL_ID, "backbone weights id or path"),
    "encoder.embed_dim": (int, 768, "embedding width (also the model input width)"),
    "encoder.pooling": (str, "pooled", "pooled | mean (backbone output pooling)"),
    "encoder.synthetic.sigma": (float, 0.1, "synthetic noise scale"),
    "encoder.synthetic.center_seed": (int, 0, "synthetic center seed"),
    "model.num_views": (int, 3, "camera views fused by the classifier"),
    "model.branch_sizes": (_parse_int_list, (512, 256), "per-view branch widths"),
    "model.branch_dropout": (_parse_float_list, (0.5, 0.6), "per-branch-layer dropout"),
    "model.fusion_sizes": (_parse_int_list, (768, 768, 512, 256, 128),
                           "fusion head widths (first entry = concat width)"),
    "model.num_classes": (int, 16, "output classes"),
    "train.max_epochs": (int, 100, "epoch budget"),
    "train.base_lr": (float, 1e-4, "peak learning rate of the 1cycle schedule"),
    "train.batch_size": (int, 256, "minibatch size"),
    "train.val_fraction": (float, 0.2, "held-out validation fraction"),
    "train.early_stop_patience": (int, 10, "epochs without val improvement"),
    "train.permute_views": (_parse_bool, True, "random view-order augmentation"),
    "train.class_weights": (_parse_float_list, None, "optional per-class loss weights"),
    "train.pct_start": (float, 0.3, "1cycle warmup fraction"),
    "train.div_factor": (float, 25.0, "1cycle initial lr divisor"),
    "train.final_div_factor": (float, 1e4, "1cycle final lr divisor"),
    "filter.window": (int, 141, "mode filter window w (odd frames; tune to the "
                               "typical duration of the driver activities)"),
    "filter.tie_policy": (str, TIE_KEEP_CENTER, "keep_center | smallest_index"),
    "eval.protocol": (str, PROTO_ALL, " | ".join(PROTOCOLS)),
    "eval.filter": (_parse_bool, True, "apply the mode filter before scoring"),
    "eval.exclude_mode": (str, EXCLUDE_RETRAIN, " | ".join(EXCLUDE_MODES)),
    "seed": (int, 0, "global random seed"),
    "jobs": (int, 1, "worker threads for the embedding pass"),
    "out": (str, "out", "output directory"),
}

_ENUMS = {
    "dataset.phase": ("both",) + mf.PHASES,
    "encoder.kind": (KIND_SYNTHETIC, KIND_PRETRAINED),
    "encoder.pooling": ("pooled", "mean"),
    "filter.tie_policy": (TIE_KEEP_CENTER, TIE_SMALLEST_INDEX),
    "eval.protocol": PROTOCOLS,
    "eval.exclude_mode": EXCLUDE_MODES,
}


class RunConfig:
    """Validated merged configuration (defaults <- file <- flag overrides)."""

    def __init__(self, values: dict):
        self._values = values
        self.validate()

    def __getitem__(self, key: str):
        return self._values[key]

    @classmethod
    def load(cls, config_path=None, overrides: dict | None = None) -> "RunConfig":
        values = {key: default for key, (_, default, _) in KEYS.items()}
        if config_path is not None:
            for key, raw in _read_config_file(config_path).items():
                values[key] = _coerce(key, raw)
        for key, raw in (overrides or {}).items():
            if raw is None:
                continue
            values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
        return cls(values)

    def validate(self) -> None:
        unknown = set(self._values) - set(KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, allowed in _ENUMS.items():
            if self._values[key] not in allowed:
                raise ConfigError(
                    f"{key} must be one of {', '.join(allowed)}, "
                    f"got {self._values[key]!r}")
        # Re-validate module invariants eagerly so bad values fail at load.
        self.model_config()
        self.train_config()
        self.filter_config()
        self.protocol()
        if self._values["jobs"] < 1:
            raise ConfigError("jobs must be >= 1")
        if self._values["dataset.folds"] < 2:
            raise ConfigError("dataset.folds must be >= 2")

    # ------------------------------------------------- derived configs

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_views=self["model.num_views"],
            embed_dim=self["encoder.embed_dim"],
            branch_sizes=self["model.branch_sizes"],
            branch_dropout=self["model.branch_dropout"],
            fusion_sizes=self["model.fusion_sizes"],
            num_classes=self["model.num_classes"],
        )

    def train_config(self) -> TrainConfig:
        weights = self["train.class_weights"]
        return TrainConfig(
            max_epochs=self["train.max_epochs"],
            base_lr=self["train.base_lr"],
            batch_size=self["train.batch_size"],
            val_fraction=self["train.val_fraction"],
            early_stop_patience=self["train.early_stop_patience"],
            permute_views=self["train.permute_views"],
            class_weights=tuple(weights) if weights else None,
            seed=self["seed"],
            pct_start=self["train.pct_start"],
            div_factor=self["train.div_factor"],
            final_div_factor=self["train.final_div_factor"],
        )

    def filter_config(self) -> FilterConfig:
        return FilterConfig(window=self["filter.window"],
                            tie_policy=self["filter.tie_policy"])

    def protocol(self) -> EvalProtocol:
        return EvalProtocol(name=self["eval.protocol"],
                            filter_on=self["eval.filter"],
                            exclude_mode=self["eval.exclude_mode"])

    def encoder_backend(self):
        if self["encoder.kind"] == KIND_SYNTHETIC:
            from .encoder import SyntheticBackend
            return SyntheticBackend(
                embed_dim=self["encoder.embed_dim"],
                num_classes=self["model.num_classes"],
                num_views=self["model.num_views"],
                sigma=self["encoder.synthetic.sigma"],
                center_seed=self["encoder.synthetic.center_seed"],
            )
        from .encoder import PretrainedBackend
        return PretrainedBackend(
            model_id_or_path=self["encoder.model_id_or_path"],
            embed_dim=self["encoder.embed_dim"],
            pooling=self["encoder.pooling"],
        )

    def synthetic_spec(self):
        from .synthetic import SyntheticSpec
        return SyntheticSpec(
            num_classes=self["synthetic.classes"],
            frames_per_class=self["synthetic.frames_per_class"],
            participants=self["synthetic.participants"],
            sample_rate_hz=self["dataset.sample_rate_hz"],
            seed=self["seed"],
        )

    # ------------------------------------------------- paths

    @property
    def out_dir(self) -> Path:
        return Path(self["out"])

    @property
    def manifest_path(self) -> Path:
        return self.out_dir / "manifest.json"

    @property
    def store_path(self) -> Path:
        return self.out_dir / "store"

    # ------------------------------------------------- round trip

    def dump(self) -> str:
        lines = ["# effective configuration; rerun with --config <this file>"]
        for key in sorted(self._values):
            value = self._values[key]
            if value is None:
                continue
            if isinstance(value, (tuple, list)):
                rendered = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                rendered = "true" if value else "false"
            else:
                rendered = str(value)
            lines.append(f"{key} = {rendered}")
        return "\n".join(lines) + "\n"

    def write_dump(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dump(), encoding="utf-8")


def _read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    entries: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, raw = stripped.partition("=")
        entries[key.strip()] = raw.strip()
    return entries


def _coerce(key: str, raw: str):
    if key not in KEYS:
        raise ConfigError(f"unknown config key {key!r}")
    parser = KEYS[key][0]
    try:
        return parser(raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{key}: cannot parse {raw!r}: {e}") from None

# Copyright (c) 2026, saml-pipeline contributors.

import os
from typing import TYPE_CHECKING, Any

import tomlkit

from .errors import InputError
from .utils import _get_config_document

if TYPE_CHECKING:
    from typing import Callable, Union

    # config options can be one of these types...
    config_val_type = Union[str, bool, int, float, None]

    # ... or a callable that returns one of those or some other mutable types
    mutable_config_val_type = list[float]
    config_val_callable = Callable[[], Union[config_val_type, mutable_config_val_type]]

    config_options_type = dict[
        str, tuple[Union[config_val_type, config_val_callable], str, bool, bool]
    ]


DEFAULT_CONFIG_FILE = "saml.toml"

DEFAULT_ARCHITECTURE = "unet(depth=2,base=16,embed=32)"


class _Section:
    """Attribute view over one ``[section]`` of a :class:`Config`."""

    def __init__(self, config: "Config", section: str):
        self._config = config
        self._section = section

    def __getattr__(self, name):
        return self._config.get(f"{self._section}.{name.replace('_', '-')}")


class Config:
    """Manage the pipeline configuration for one experiment."""

    # Mapping from config option to default value, value type, whether it's
    # required, and whether it may be overridden by an environment variable or a
    # config setting. Options without a section live at the top of the file.
    config_options: "config_options_type" = {
        "seed": (0, "int", False, True),
        "jobs": (1, "int", False, True),
        "paths.corpus": (None, "str", True, True),
        "paths.output": ("saml-out", "str", False, True),
        "paths.reference": (None, "str", False, True),
        "paths.checkpoint": (None, "str", False, True),
        "experiment.method": ("sam-l-random", "str", False, True),
        "experiment.annotator-group": ("lay", "str", False, True),
        "experiment.labels": ("pseudolabels", "str", False, True),
        "experiment.matrix": ("segmentation", "str", False, True),
        "experiment.methods": (
            lambda: ["mocl-pixel", "sam-l-tight", "sam-l-random"],
            "strs",
            False,
            True,
        ),
        "dataset.resolution-policy": ("smaller_area", "str", False, True),
        "boxes.mode": ("random", "str", False, True),
        "boxes.max-offset": (0.1, "float", False, True),
        "boxes.relative-offset": (True, "bool", False, True),
        "boxes.seed": (None, "int", False, True),
        "boxes.samples-per-instance": (1, "int", False, True),
        "segmenter.backend": ("oracle", "str", False, True),
        "segmenter.threshold": (0.5, "float", False, True),
        "segmenter.max-concurrency": (None, "int", False, True),
        "segmenter.model-type": ("vit_b", "str", False, True),
        "segmenter.checkpoint": (None, "str", False, True),
        "segmenter.device": ("cpu", "str", False, True),
        "segmenter.version": (None, "str", False, True),
        "segmenter.dilate-px": (0, "int", False, True),
        "segmenter.erode-px": (0, "int", False, True),
        "segmenter.merge-policy": ("confidence", "str", False, True),
        "split.ratios": (lambda: [6.0, 1.0, 3.0], "floats", False, True),
        "split.seed": (None, "int", False, True),
        "mocl.architecture": (DEFAULT_ARCHITECTURE, "str", False, False),
        "mocl.corrective": (True, "bool", False, True),
        "mocl.k-fraction": (0.05, "float", False, True),
        "mocl.warmup-epochs": (5, "int", False, True),
        "mocl.epochs": (20, "int", False, True),
        "mocl.batch-size": (8, "int", False, True),
        "mocl.learning-rate": (1e-3, "float", False, True),
        "mocl.seed": (None, "int", False, True),
        "mocl.similarity-aggregation": ("mean", "str", False, True),
        "mocl.sample-pixels": (None, "int", False, True),
        "mocl.background": ("anchors", "str", False, True),
        "mocl.cache": ("batch", "str", False, True),
        "mocl.deterministic": (True, "bool", False, True),
        "metrics.pooling": ("micro", "str", False, True),
        "synth.n-patches": (50, "int", False, True),
        "synth.height": (64, "int", False, True),
        "synth.width": (64, "int", False, True),
        "synth.blobs-per-class": (lambda: [1, 3], "ints", False, True),
        "synth.radius": (lambda: [4, 7], "ints", False, True),
        "synth.injured-fraction": (0.5, "float", False, True),
        "synth.corruption-fraction": (0.0, "float", False, True),
        "synth.dilate-px": (lambda: [1, 3], "ints", False, True),
        "synth.erode-px": (lambda: [1, 2], "ints", False, True),
        "synth.seed": (None, "int", False, True),
    }

    def __init__(self, path=None, config_settings=None, *, document=None):
        self.path = path
        self.config_settings = config_settings or {}
        if document is None:
            if path is None:
                document = tomlkit.document()
            else:
                try:
                    document = _get_config_document(path)
                except FileNotFoundError as e:
                    raise InputError(f"Configuration file not found: {path}") from e
        self.config = document.unwrap() if hasattr(document, "unwrap") else document
        self._check_unknown_keys()

    @classmethod
    def loads(cls, text: str, config_settings=None) -> "Config":
        return cls(config_settings=config_settings, document=tomlkit.parse(text))

    def _check_unknown_keys(self):
        for key, value in self.config.items():
            if isinstance(value, dict):
                for sub_key in value:
                    if f"{key}.{sub_key}" not in Config.config_options:
                        raise InputError(
                            f"Unknown configuration option '{key}.{sub_key}'"
                        )
            elif key not in Config.config_options:
                raise InputError(f"Unknown configuration option '{key}'")
        for key in self.config_settings:
            if key not in Config.config_options:
                raise InputError(f"Unknown configuration setting '{key}'")

    def _lookup_file(self, option: str):
        section, _, name = option.rpartition(".")
        table = self.config.get(section, {}) if section else self.config
        return table[name]

    def get(self, option: str):
        if option not in Config.config_options:
            raise AttributeError(f"Attempted to access unknown option '{option}'")
        default_value, value_type, required, allows_override = Config.config_options[
            option
        ]
        if callable(default_value):
            default_value = default_value()

        # If overrides are allowed environment variables take precedence over the
        # config_settings dict.
        if allows_override:
            env_var = "SAML_" + option.replace(".", "_").replace("-", "_").upper()
            if env_var in os.environ:
                return _coerce(os.environ[env_var], value_type, env_var)
            if option in self.config_settings:
                return _coerce(self.config_settings[option], value_type, option)

        try:
            return _coerce(self._lookup_file(option), value_type, option)
        except KeyError:
            if not required:
                return default_value

            raise AttributeError(f"Config is missing required attribute '{option}'")

    def __getattr__(self, name):
        if name.startswith("_"):
            raise AttributeError(name)
        sections = {
            opt.partition(".")[0] for opt in Config.config_options if "." in opt
        }
        if name in sections:
            return _Section(self, name)
        return self.get(name.replace("_", "-"))

    def seed_for(self, section: str) -> int:
        """The section's own seed, falling back to the global seed."""
        seed = self.get(f"{section}.seed")
        return self.seed if seed is None else seed

    def resolved(self) -> dict[str, Any]:
        """Every option with overrides and defaults applied (None when unset)."""
        values = {}
        for option in Config.config_options:
            try:
                values[option] = self.get(option)
            except AttributeError:
                values[option] = None
        return values

    def dumps(self) -> str:
        """Serialize the resolved configuration as a TOML document.

        Options that resolve to None are omitted since TOML has no null.
        """
        doc = tomlkit.document()
        tables: dict[str, tomlkit.items.Table] = {}
        for option, value in self.resolved().items():
            if value is None:
                continue
            section, _, name = option.rpartition(".")
            if not section:
                doc[name] = value
                continue
            if section not in tables:
                tables[section] = tomlkit.table()
            tables[section][name] = value
        for section, table in tables.items():
            doc[section] = table
        return tomlkit.dumps(doc)

    def with_settings(self, **settings) -> "Config":
        """A copy with extra ``section.option`` settings layered on top.

        Keys use ``__`` for the section dot and ``_`` for hyphens, e.g.
        ``boxes__mode="tight"``.
        """
        merged = dict(self.config_settings)
        for key, value in settings.items():
            option = key.replace("__", ".").replace("_", "-")
            merged[option] = value
        return Config(self.path, merged, document=self.config)


def _coerce(value, value_type: str, source: str):
    """Convert a raw config value (file value or override string) to its type."""
    if value is None:
        return None
    if isinstance(value, str) and value_type != "str":
        if value_type == "bool":
            if value not in ("true", "false"):
                raise ValueError(f"{source} must be 'true' or 'false', not {value}")
            return value == "true"
        if value_type in ("ints", "floats", "strs"):
            value = [item.strip() for item in value.split(",") if item.strip()]
        else:
            value = int(value) if value_type == "int" else float(value)
    if value_type == "bool":
        if not isinstance(value, bool):
            raise InputError(f"{source} must be a boolean, not {value!r}")
        return value
    if value_type == "int":
        if isinstance(value, bool) or int(value) != value:
            raise InputError(f"{source} must be an integer, not {value!r}")
        return int(value)
    if value_type == "float":
        return float(value)
    if value_type in ("ints", "floats", "strs"):
        if isinstance(value, (str, int, float)):
            raise InputError(f"{source} must be a list, not {value!r}")
        convert = {"ints": int, "floats": float, "strs": str}[value_type]
        return [convert(item) for item in value]
    return str(value)

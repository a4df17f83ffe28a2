"""Pipeline configuration stored as an INI-style file with sections."""
import configparser
import io
from dataclasses import asdict, dataclass, field, fields

__all__ = ["PipelineConfig", "load_config", "dump_config"]


@dataclass
class KernelSection:
    alpha1: float = 1.0
    alpha2: float = 5.0
    m: int = 5
    window: int = 5
    shift: int = 2


@dataclass
class EmbeddingSection:
    k1: int = 10
    k2: int = 5
    d: int = 6
    h: float = 1.0
    classifier_k: int = 15


@dataclass
class CrfSection:
    w: float = 1.0
    sigma_f: str = "auto"
    sigma_scale: float = 0.75
    T_mode: str = "auto"
    lambda_max: float = 32.0
    beta_q: float = 1.0
    k_f: int = 5


@dataclass
class SuperpixelSection:
    target_size: int = 12
    group_factor: int = 4


@dataclass
class TrainingSection:
    samples_per_class: int = 200
    band_radius: int = 10


@dataclass
class SeedSection:
    seed: int = 0


@dataclass
class PipelineConfig:
    kernel: KernelSection = field(default_factory=KernelSection)
    embedding: EmbeddingSection = field(default_factory=EmbeddingSection)
    crf: CrfSection = field(default_factory=CrfSection)
    superpixel: SuperpixelSection = field(default_factory=SuperpixelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    seeds: SeedSection = field(default_factory=SeedSection)

    def set(self, dotted, value):
        """Override one key, e.g. ``set("crf.w", "0.5")``; the value is coerced."""
        try:
            section, key = dotted.split(".", 1)
            sec = getattr(self, section)
        except (ValueError, AttributeError):
            raise KeyError(f"unknown config section in {dotted!r}") from None
        types = {f.name: f.type for f in fields(sec)}
        if key not in types:
            raise KeyError(f"unknown config key {dotted!r}")
        setattr(sec, key, _coerce(types[key], value, dotted))

    def validate(self):
        k, e, c, s, t = self.kernel, self.embedding, self.crf, self.superpixel, self.training
        checks = [
            (k.alpha1 >= 0 and k.alpha2 >= 0 and k.alpha1 + k.alpha2 > 0, "kernel weights"),
            (k.window >= 1 and k.window % 2 == 1, "kernel.window must be odd and positive"),
            (k.shift >= 0, "kernel.shift must be >= 0"),
            (1 <= k.m <= min(k.window ** 2, (2 * k.shift + 1) ** 2), "kernel.m out of range"),
            (e.k1 >= 1 and e.k2 >= 1 and e.d >= 1 and e.classifier_k >= 1,
             "embedding sizes must be >= 1"),
            (e.h >= 0, "embedding.h must be >= 0"),
            (c.w >= 0 and c.lambda_max >= 0 and c.beta_q >= 0 and c.k_f >= 0,
             "crf weights must be >= 0"),
            (c.sigma_f == "auto" or _positive(c.sigma_f), "crf.sigma_f must be auto or > 0"),
            (c.sigma_scale > 0, "crf.sigma_scale must be > 0"),
            (c.T_mode == "auto" or (c.T_mode.isdigit() and int(c.T_mode) >= 1),
             "crf.T_mode must be auto or an integer >= 1"),
            (s.target_size >= 4 and s.group_factor >= 1, "superpixel sizes"),
            (t.samples_per_class >= e.k1 + 1, "training.samples_per_class must exceed k1"),
            (t.band_radius >= 1, "training.band_radius must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"invalid configuration: {msg}")
        return self

    def segmenter_params(self):
        """Keyword arguments for :class:`~dgmseg.estimators.ManifoldCRFSegmenter`."""
        k, e, c = self.kernel, self.embedding, self.crf
        return dict(
            alpha1=k.alpha1, alpha2=k.alpha2, subspace_dim=k.m, window=k.window,
            shift=k.shift, k1=e.k1, k2=e.k2, n_components=e.d, h=e.h,
            classifier_k=e.classifier_k, w=c.w,
            sigma_f=None if c.sigma_f == "auto" else float(c.sigma_f),
            truncation=None if c.T_mode == "auto" else int(c.T_mode),
            lambda_max=c.lambda_max, beta_q=c.beta_q, k_f=c.k_f, sigma_scale=c.sigma_scale,
            target_size=self.superpixel.target_size,
            group_factor=self.superpixel.group_factor,
            samples_per_class=self.training.samples_per_class,
            band_radius=self.training.band_radius, random_state=self.seeds.seed)


def _positive(text):
    try:
        return float(text) > 0
    except ValueError:
        return False


def _coerce(typ, value, name):
    if isinstance(typ, str):
        typ = {"int": int, "float": float, "str": str}[typ]
    try:
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
    except (TypeError, ValueError):
        raise ValueError(f"{name}: cannot parse {value!r} as {typ.__name__}") from None
    return str(value)


def load_config(path=None, overrides=()):
    """Defaults, then ``path`` (if given), then ``section.key=value`` overrides."""
    cfg = PipelineConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(f"{section}.{key}", value)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not of the form section.key=value")
        cfg.set(key.strip(), value.strip())
    return cfg.validate()


def dump_config(cfg):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for name, values in asdict(cfg).items():
        parser[name] = {k: repr(v) if isinstance(v, float) else str(v)
                        for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()

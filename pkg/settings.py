"""
Settings for continual object navigation runs

Each section is a class whose annotated class attributes are the defaults. A run
is configured by a flat key = value text file with [section] headers; unknown
sections or keys are rejected.
"""

import configparser
import json

from util import ConfigError, sha256_hex

class Section:
    """base class for a config section"""

    name = ''
    choices: dict = {}

    def __init__(self, **overrides):
        for key in self.keys():
            setattr(self, key, getattr(type(self), key))

        for key, value in overrides.items():
            self.set(key, value)

    @classmethod
    def keys(cls):
        'field names in declaration order'

        return [k for k in cls.__annotations__ if k != 'choices']

    def set(self, key, value):
        """assign a field, parsing strings to the declared type"""

        if key not in self.keys():
            raise ConfigError(f"unknown key '{key}' in section [{self.name}]")

        typ = type(self).__annotations__[key]

        try:
            if typ is bool:
                if isinstance(value, str):
                    lowered = value.strip().lower()

                    if lowered not in ('true', 'false', '1', '0', 'yes', 'no'):
                        raise ValueError(value)

                    value = lowered in ('true', '1', 'yes')
                else:
                    value = bool(value)
            elif typ is int:
                if isinstance(value, float) and not value.is_integer():
                    raise ValueError(value)

                value = int(value)
            elif typ is float:
                value = float(value)
            else:
                value = str(value).strip()
        except ValueError:
            raise ConfigError(f"[{self.name}] {key}: cannot parse {value!r} as {typ.__name__}") from None

        allowed = self.choices.get(key)

        if allowed is not None and value not in allowed:
            raise ConfigError(f"[{self.name}] {key} must be one of {allowed}, got {value!r}")

        setattr(self, key, value)

    def validate(self):
        """range checks; raise ConfigError"""

    def items(self):
        'list of (key, value)'

        return [(k, getattr(self, k)) for k in self.keys()]

    def _require(self, cond, msg):
        if not cond:
            raise ConfigError(f"[{self.name}] {msg}")

def format_value(value):
    'canonical text form of a config value'

    if isinstance(value, bool):
        return 'true' if value else 'false'

    if isinstance(value, float):
        return repr(value)

    return str(value)

class MazeSettings(Section):
    name = 'maze'

    width: int = 15
    height: int = 15
    n_objects: int = 6
    window_radius: int = 2
    loop_fraction: float = 0.15

    def validate(self):
        self._require(self.window_radius >= 0, "window_radius must be >= 0")
        self._require(0.0 <= self.loop_fraction <= 1.0, "loop_fraction must be in [0, 1]")
        self._require(self.n_objects >= 2, "n_objects must be >= 2 (goals never repeat back to back)")

class DataSettings(Section):
    name = 'data'

    n_envs: int = 128
    stream_length: int = 2000

    def validate(self):
        self._require(self.n_envs >= 1, "n_envs must be >= 1")
        self._require(self.stream_length >= 1, f"stream_length must be >= 1, got {self.stream_length}")

class ModelSettings(Section):
    name = 'model'
    choices = {'feature_map': ('elu_plus_one',)}

    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_key: int = 32
    d_value: int = 32
    mlp_ratio: int = 4
    feature_map: str = 'elu_plus_one'
    decay_enabled: bool = True
    normalized: bool = False
    decay_init: float = 3.0 # sigmoid(3) ~= 0.95
    init_std: float = 0.02

    def validate(self):
        for key in ('d_model', 'n_layers', 'n_heads', 'd_key', 'd_value', 'mlp_ratio'):
            self._require(getattr(self, key) >= 1, f"{key} must be >= 1")

        self._require(self.init_std > 0, "init_std must be positive")

class TrainSettings(Section):
    name = 'train'
    choices = {'mode': ('stateful', 'stateless'), 'schedule': ('linear',), 'optimizer': ('adam',)}

    mode: str = 'stateful'
    segment_length: int = 64
    slots: int = 8
    epochs: int = 10
    lr: float = 1e-4
    schedule: str = 'linear'
    optimizer: str = 'adam'
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0 # global norm, 0 disables clipping
    checkpoint_every: int = 0 # steps between checkpoint_latest writes, 0 = epoch ends only
    print_every: int = 50

    def validate(self):
        self._require(self.segment_length >= 1, "segment_length must be >= 1")
        self._require(self.slots >= 1, "slots must be >= 1")
        self._require(self.epochs >= 1, "epochs must be >= 1")
        self._require(self.lr > 0, "lr must be positive")
        self._require(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "betas must be in [0, 1)")
        self._require(self.adam_eps > 0, "adam_eps must be positive")
        self._require(self.grad_clip >= 0, "grad_clip must be >= 0")
        self._require(self.checkpoint_every >= 0, "checkpoint_every must be >= 0")

class EvalSettings(Section):
    name = 'eval'
    choices = {'state_handling': ('continuous', 'reset_per_task'), 'action_selection': ('greedy',),
               'rsd_norm': ('frobenius', 'head_sum')}

    n_envs: int = 16
    max_steps: int = 5000
    task_cap: int = 500
    state_handling: str = 'continuous'
    action_selection: str = 'greedy'
    icl_bucket: int = 500
    rsd_burn_in: int = 100
    rsd_norm: str = 'frobenius'
    rsd_ddof: int = 0 # 0 = population std

    def validate(self):
        self._require(self.n_envs >= 1, "n_envs must be >= 1")
        self._require(1 <= self.task_cap <= self.max_steps, "need 1 <= task_cap <= max_steps")
        self._require(self.icl_bucket >= 1, "icl_bucket must be >= 1")
        self._require(self.rsd_burn_in >= 0, "rsd_burn_in must be >= 0")
        self._require(self.rsd_ddof in (0, 1), "rsd_ddof must be 0 or 1")

class SeedSettings(Section):
    name = 'seeds'

    master: int = 0 # training env generation
    shuffle: int = 0 # stream-to-slot order
    init: int = 0 # weight init
    eval: int = 0 # evaluation envs (reserved seed range)

class RunSettings(Section):
    name = 'run'
    choices = {'precision': ('f32', 'f64')}

    precision: str = 'f32'
    threads: int = 1

    def validate(self):
        self._require(self.threads >= 1, "threads must be >= 1")

class PathSettings(Section):
    name = 'paths'

    data_dir: str = 'data'
    train_dir: str = 'runs/train'
    eval_dir: str = 'runs/eval'

class RunConfig:
    """the full resolved configuration of a run"""

    section_types = (MazeSettings, DataSettings, ModelSettings, TrainSettings, EvalSettings,
                     SeedSettings, RunSettings, PathSettings)

    # execution details that never change results
    unhashed = ('run.threads', 'paths.data_dir', 'paths.train_dir', 'paths.eval_dir')

    def __init__(self):
        for st in RunConfig.section_types:
            setattr(self, st.name, st())

    def sections(self):
        'list of Section objects in canonical order'

        return [getattr(self, st.name) for st in RunConfig.section_types]

    @classmethod
    def from_text(cls, text):
        """parse flat key = value text with [section] headers"""

        parser = configparser.ConfigParser(interpolation=None, delimiters=('=',), comment_prefixes=('#', ';'))
        parser.optionxform = str # keys are case-sensitive

        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"config parse error: {e}") from None

        rv = cls()
        known = {st.name for st in cls.section_types}

        for section_name in parser.sections():
            if section_name not in known:
                raise ConfigError(f"unknown config section [{section_name}]")

            section = getattr(rv, section_name)

            for key, value in parser.items(section_name):
                section.set(key, value)

        rv.validate()

        return rv

    @classmethod
    def from_file(cls, path):
        'load a config file'

        try:
            with open(path, 'r', encoding='utf-8') as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from None

        return cls.from_text(text)

    def validate(self):
        'validate all sections'

        for section in self.sections():
            section.validate()

    def override(self, dotted_key, value):
        """set 'section.key' and revalidate"""

        section_name, key = dotted_key.split('.', 1)
        section = getattr(self, section_name, None)

        if not isinstance(section, Section):
            raise ConfigError(f"unknown config section [{section_name}]")

        section.set(key, value)
        section.validate()

    def copy(self):
        'independent copy'

        return RunConfig.from_text(self.to_text())

    def to_text(self):
        'canonical serialization'

        lines = []

        for section in self.sections():
            lines.append(f"[{section.name}]")

            for key, value in section.items():
                lines.append(f"{key} = {format_value(value)}")

            lines.append("")

        return "\n".join(lines)

    def to_dict(self):
        'nested dict of all values'

        return {s.name: dict(s.items()) for s in self.sections()}

    def hash(self):
        """sha256 of the canonical serialization, excluding execution-only keys"""

        lines = []

        for section in self.sections():
            for key, value in section.items():
                dotted = f"{section.name}.{key}"

                if dotted not in RunConfig.unhashed:
                    lines.append(f"{dotted}={format_value(value)}")

        return sha256_hex("\n".join(lines))

    def model_echo(self):
        """everything that determines the network's geometry"""

        rv = dict(self.model.items())
        rv['n_objects'] = self.maze.n_objects
        rv['window_radius'] = self.maze.window_radius

        return rv

    def model_hash(self):
        'hash of model_echo()'

        return sha256_hex(json.dumps(self.model_echo(), sort_keys=True))

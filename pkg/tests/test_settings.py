"""tests for config parsing, overrides and hashing"""

import os

import pytest

from settings import MazeSettings, RunConfig
from util import ConfigError

TEXT = """
# a small run
[maze]
width = 9
height = 9
n_objects = 3

[train]
mode = stateless
grad_clip = 0.5

[run]
threads = 4
"""

def test_parse_text():
    config = RunConfig.from_text(TEXT)

    assert config.maze.width == 9 and config.maze.n_objects == 3
    assert config.maze.window_radius == 2 # default kept
    assert config.train.mode == 'stateless'
    assert config.train.grad_clip == 0.5
    assert isinstance(config.train.grad_clip, float)
    assert config.run.threads == 4

def test_unknown_section_and_key():
    with pytest.raises(ConfigError):
        RunConfig.from_text("[optimizer]\nlr = 1\n")

    with pytest.raises(ConfigError):
        RunConfig.from_text("[train]\nlearning_rate = 1\n")

def test_bad_values():
    with pytest.raises(ConfigError):
        RunConfig.from_text("[train]\nmode = sometimes\n")

    with pytest.raises(ConfigError):
        RunConfig.from_text("[maze]\nwidth = wide\n")

    with pytest.raises(ConfigError):
        RunConfig.from_text("[model]\ndecay_enabled = maybe\n")

    with pytest.raises(ConfigError):
        RunConfig.from_text("[eval]\ntask_cap = 10\nmax_steps = 5\n")

def test_needs_two_objects():
    with pytest.raises(ConfigError):
        RunConfig.from_text("[maze]\nn_objects = 1\n")

    with pytest.raises(ConfigError):
        MazeSettings(n_objects=1).validate()

def test_threads_and_paths_do_not_change_the_hash():
    a = RunConfig.from_text(TEXT)
    b = RunConfig.from_text(TEXT.replace('threads = 4', 'threads = 1'))
    b.paths.data_dir = 'elsewhere'

    assert a.hash() == b.hash()

    b.override('train.lr', '2e-4')

    assert a.hash() != b.hash()

def test_override():
    config = RunConfig()
    config.override('model.normalized', 'true')
    config.override('eval.state_handling', 'reset_per_task')

    assert config.model.normalized is True
    assert config.eval.state_handling == 'reset_per_task'

    with pytest.raises(ConfigError):
        config.override('nothing.here', '1')

    with pytest.raises(ConfigError):
        config.override('model.d_model', '0')

def test_copy_and_text_round_trip():
    config = RunConfig.from_text(TEXT)
    again = RunConfig.from_text(config.to_text())

    assert again.to_dict() == config.to_dict()
    assert config.copy().hash() == config.hash()

    config.copy().train.lr = 1.0

    assert config.train.lr != 1.0

def test_model_hash_tracks_geometry_only():
    a = RunConfig()
    b = RunConfig()
    b.train.lr = 1e-2
    b.train.mode = 'stateless'

    assert a.model_hash() == b.model_hash()

    b.maze.window_radius = 1

    assert a.model_hash() != b.model_hash()
    assert a.model_echo()['n_objects'] == 6

def test_from_file(tmp_path):
    path = os.path.join(tmp_path, 'run.cfg')

    with open(path, 'w', encoding='utf-8') as f:
        f.write(TEXT)

    assert RunConfig.from_file(path).hash() == RunConfig.from_text(TEXT).hash()

    with pytest.raises(ConfigError):
        RunConfig.from_file(os.path.join(tmp_path, 'missing.cfg'))

# coding=utf-8
# Copyright 2024 The Google Research Authors.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Configuration types and their strict JSON codec.

A config file looks like

  {"schema_version": "1", "scenario": {...}, "grid": {...}}

with "grid" optional. Signal specs and conditioners are tagged objects, e.g.
{"type": "sine", "f": 5000.0, "amplitude_pp": 0.2}. Unknown keys, missing
required keys and values of the wrong type raise ConfigError naming the dotted
path of the field.
"""

from __future__ import absolute_import
from __future__ import division
from __future__ import print_function

import collections
import hashlib
import json
import numbers

import numpy as np

from emshield import coupling
from emshield import detector
from emshield import devices
from emshield import errors
from emshield import waveform

SCHEMA_VERSION = "1"
SYSTEMS = ("speaker", "motor")

# Attack injected from `onset` seconds on.
AttackConfig = collections.namedtuple(
    "AttackConfig", ["spec", "onset"], defaults=(0.0,))

# Analytics use [settle, duration). The speaker compares the band around
# f_malicious against the band around f_legit; the motor measures duty cycle.
AnalysisConfig = collections.namedtuple(
    "AnalysisConfig", ["settle", "bandwidth", "f_legit", "f_malicious"],
    defaults=(500.0, None, None))

ScenarioConfig = collections.namedtuple(
    "ScenarioConfig", [
        "system", "legit", "conditioner", "detection_amp", "coupling",
        "attack", "detector", "sample_rate", "duration", "seed", "analysis"
    ])

# min_sample_rate of None means the base scenario's rate.
SweepGrid = collections.namedtuple(
    "SweepGrid", [
        "freqs", "amplitudes", "repeats", "include_no_attack",
        "min_sample_rate", "oversample"
    ],
    defaults=(1, 0, None, 10.0))

ConfigFile = collections.namedtuple(
    "ConfigFile", ["scenario", "grid"], defaults=(None,))

_SIGNAL_TAGS = collections.OrderedDict([
    ("sine", waveform.Sine),
    ("pwm", waveform.Pwm),
    ("am", waveform.Am),
    ("silence", waveform.Silence),
    ("sum", waveform.Sum),
    ("gated", waveform.Gated),
])
_CONDITIONER_TAGS = collections.OrderedDict([
    ("audio_amp", devices.AudioAmp),
    ("motor_driver", devices.MotorDriver),
])
_TAGS_BY_TYPE = {
    cls: tag
    for tags in (_SIGNAL_TAGS, _CONDITIONER_TAGS)
    for tag, cls in tags.items()
}


def _join(path, key):
  return "{}.{}".format(path, key) if path else str(key)


def _float(value, path):
  if isinstance(value, bool) or not isinstance(value, numbers.Real):
    raise errors.ConfigError(path, "expected a number, got {!r}".format(value))
  return float(value)


def _int(value, path):
  if isinstance(value, bool) or not isinstance(value, numbers.Integral):
    raise errors.ConfigError(path,
                             "expected an integer, got {!r}".format(value))
  return int(value)


def _system(value, path):
  if value not in SYSTEMS:
    raise errors.ConfigError(
        path, "expected one of {}, got {!r}".format(SYSTEMS, value))
  return value


def _optional(decode):

  def decode_optional(value, path):
    return None if value is None else decode(value, path)

  return decode_optional


def _sequence(decode):

  def decode_sequence(value, path):
    if not isinstance(value, (list, tuple)):
      raise errors.ConfigError(path,
                               "expected a list, got {!r}".format(value))
    return tuple(
        decode(item, "{}[{}]".format(path, i)) for i, item in enumerate(value))

  return decode_sequence


def _window(value, path):
  window = _sequence(_float)(value, path)
  if len(window) != 2:
    raise errors.ConfigError(path, "expected [start, end]")
  return window


# JSON keys that differ from the namedtuple field names.
_JSON_KEYS = {
    coupling.TransferFunction: {
        "broadband_gain": "gain",
        "delay": "delay_s",
    },
}


def _json_key(cls, field):
  return _JSON_KEYS.get(cls, {}).get(field, field)


def _record(cls, decoders):
  """Decoder for a namedtuple whose fields use `decoders`."""
  keys = collections.OrderedDict(
      (_json_key(cls, field), field) for field in cls._fields)

  def decode_record(value, path):
    if not isinstance(value, dict):
      raise errors.ConfigError(path,
                               "expected an object, got {!r}".format(value))
    for key in value:
      if key not in keys:
        raise errors.ConfigError(_join(path, key), "unknown field")
    kwargs = {}
    for key, field in keys.items():
      if key in value:
        kwargs[field] = decoders[field](value[key], _join(path, key))
      elif field not in cls._field_defaults:
        raise errors.ConfigError(_join(path, key), "missing required field")
    return cls(**kwargs)

  return decode_record


def _tagged(tags, decoders):
  """Decoder for {"type": tag, ...} objects."""

  def decode_tagged(value, path):
    if not isinstance(value, dict):
      raise errors.ConfigError(path,
                               "expected an object, got {!r}".format(value))
    tag = value.get("type")
    if tag not in tags:
      raise errors.ConfigError(
          _join(path, "type"),
          "expected one of {}, got {!r}".format(list(tags), tag))
    fields = dict(value)
    del fields["type"]
    return decoders[tag](fields, path)

  return decode_tagged


def _decode_signal(value, path):
  return _SIGNAL_DECODER(value, path)


def _floats(cls, **overrides):
  decoders = {field: _float for field in cls._fields}
  decoders.update(overrides)
  return _record(cls, decoders)


_SIGNAL_DECODER = _tagged(
    _SIGNAL_TAGS, {
        "sine": _floats(waveform.Sine),
        "pwm": _floats(waveform.Pwm),
        "am": _floats(waveform.Am),
        "silence": _record(waveform.Silence, {}),
        "sum": _record(waveform.Sum,
                       {"components": _sequence(_decode_signal)}),
        "gated": _record(waveform.Gated, {
            "inner": _decode_signal,
            "windows": _sequence(_window)
        }),
    })

_PAIR_DECODER = _floats(
    coupling.CouplingPair,
    t_c=_floats(
        coupling.TransferFunction,
        modes=_sequence(_floats(coupling.Mode))))

_DIFF_AMP_DECODER = _floats(devices.DiffAmpModel, feedback_exponent=_int)

_CONDITIONER_DECODER = _tagged(
    _CONDITIONER_TAGS, {
        "audio_amp": _floats(devices.AudioAmp, feedback_exponent=_int),
        "motor_driver": _floats(devices.MotorDriver, feedback_exponent=_int),
    })

_DETECTOR_DECODER = _floats(
    detector.DetectorConfig,
    debounce=_int,
    adaptive=_optional(_floats(detector.AdaptivePolicy)))

_SCENARIO_DECODER = _record(
    ScenarioConfig, {
        "system": _system,
        "legit": _decode_signal,
        "conditioner": _CONDITIONER_DECODER,
        "detection_amp": _DIFF_AMP_DECODER,
        "coupling": _PAIR_DECODER,
        "attack": _optional(_floats(AttackConfig, spec=_decode_signal)),
        "detector": _DETECTOR_DECODER,
        "sample_rate": _float,
        "duration": _float,
        "seed": _int,
        "analysis": _floats(
            AnalysisConfig,
            f_legit=_optional(_float),
            f_malicious=_optional(_float)),
    })

_GRID_DECODER = _record(
    SweepGrid, {
        "freqs": _sequence(_float),
        "amplitudes": _sequence(_float),
        "repeats": _int,
        "include_no_attack": _int,
        "min_sample_rate": _optional(_float),
        "oversample": _float,
    })


def to_dict(value):
  """Converts a config value (namedtuples, tuples, numbers) to JSON types."""
  if isinstance(value, tuple) and hasattr(value, "_fields"):
    output = collections.OrderedDict()
    tag = _TAGS_BY_TYPE.get(type(value))
    if tag is not None:
      output["type"] = tag
    for field in value._fields:
      output[_json_key(type(value), field)] = to_dict(getattr(value, field))
    return output
  if isinstance(value, dict):
    return collections.OrderedDict(
        (key, to_dict(item)) for key, item in value.items())
  if isinstance(value, (list, tuple)):
    return [to_dict(item) for item in value]
  if isinstance(value, np.generic):
    return value.item()
  return value


def scenario_from_dict(data, path="scenario"):
  return _SCENARIO_DECODER(data, path)


def grid_from_dict(data, path="grid"):
  return _GRID_DECODER(data, path)


def from_dict(data):
  """Builds a ConfigFile from a parsed JSON document.

  Raises:
    ConfigError: The document does not match schema version 1.
  """
  if not isinstance(data, dict):
    raise errors.ConfigError("", "expected a JSON object")
  for key in data:
    if key not in ("schema_version", "scenario", "grid"):
      raise errors.ConfigError(key, "unknown field")
  if data.get("schema_version") != SCHEMA_VERSION:
    raise errors.ConfigError(
        "schema_version", "expected {!r}, got {!r}".format(
            SCHEMA_VERSION, data.get("schema_version")))
  if "scenario" not in data:
    raise errors.ConfigError("scenario", "missing required field")
  grid = data.get("grid")
  return ConfigFile(
      scenario=scenario_from_dict(data["scenario"]),
      grid=None if grid is None else grid_from_dict(grid))


def file_to_dict(config_file):
  output = collections.OrderedDict([("schema_version", SCHEMA_VERSION),
                                    ("scenario",
                                     to_dict(config_file.scenario))])
  if config_file.grid is not None:
    output["grid"] = to_dict(config_file.grid)
  return output


def to_json_string(config_file):
  """Serializes a ConfigFile to a JSON string."""
  return json.dumps(file_to_dict(config_file), indent=2, sort_keys=True) + "\n"


def from_json_file(json_file):
  """Reads a ConfigFile; I/O errors propagate unchanged."""
  with open(json_file, "r") as reader:
    text = reader.read()
  try:
    data = json.loads(text)
  except ValueError as e:
    raise errors.ConfigError(json_file, "not valid JSON: {}".format(e))
  return from_dict(data)


def canonical_hash(value):
  """SHA-256 hex digest of the sorted, compact JSON form of `value`."""
  canonical = json.dumps(to_dict(value), sort_keys=True, separators=(",", ":"))
  return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def config_hash(scenario, grid=None):
  return canonical_hash({"scenario": scenario, "grid": grid})


def _reraise(path, check, *args):
  try:
    check(*args)
  except errors.ConfigError:
    raise
  except errors.Error as e:
    raise errors.ConfigError(path, str(e))


def _check_signal(spec, sample_rate, duration):
  highest = waveform.max_frequency(spec)
  if sample_rate < 10.0 * highest:
    raise errors.AliasingError(
        "sample rate {} Hz is below 10x the highest frequency {} Hz".format(
            sample_rate, highest))
  waveform.check_ranges(spec, 0.0, duration)


def _check_analysis(cfg):
  analysis = cfg.analysis
  window = cfg.duration - analysis.settle
  if not 0 <= analysis.settle < cfg.duration:
    raise errors.InvalidSpec("settle must be in [0, duration)")
  if cfg.system == "speaker":
    if analysis.f_legit is None or analysis.f_malicious is None:
      raise errors.InvalidSpec("speaker analysis needs f_legit and f_malicious")
    if not analysis.bandwidth > 0:
      raise errors.InvalidSpec("bandwidth must be positive")
    lowest = min(analysis.f_legit, analysis.f_malicious)
    if window * lowest < 20.0 - 1e-9:
      raise errors.InvalidSpec(
          "analysis window {} s holds fewer than 20 periods of {} Hz".format(
              window, lowest))
  elif isinstance(cfg.legit, waveform.Pwm):
    if window * cfg.legit.f < 5.0 - 1e-9:
      raise errors.InvalidSpec(
          "analysis window {} s holds fewer than 5 PWM periods".format(window))


def validate_scenario(cfg, path="scenario"):
  """Checks a ScenarioConfig against its invariants.

  Raises:
    ConfigError: naming the first offending field.
  """
  _system(cfg.system, _join(path, "system"))
  if not cfg.sample_rate > 0:
    raise errors.ConfigError(_join(path, "sample_rate"), "must be positive")
  if not cfg.duration > 0:
    raise errors.ConfigError(_join(path, "duration"), "must be positive")
  _reraise(_join(path, "legit"), _check_signal, cfg.legit, cfg.sample_rate,
           cfg.duration)
  if cfg.attack is not None:
    if not 0 <= cfg.attack.onset < cfg.duration:
      raise errors.ConfigError(
          _join(path, "attack.onset"), "must be in [0, duration)")
    _reraise(_join(path, "attack.spec"), _check_signal, cfg.attack.spec,
             cfg.sample_rate, cfg.duration)
  if cfg.system == "speaker":
    expected = devices.AudioAmp
  else:
    expected = devices.MotorDriver
  if not isinstance(cfg.conditioner, expected):
    raise errors.ConfigError(
        _join(path, "conditioner"),
        "{} systems need a {}".format(cfg.system, expected.__name__))
  _reraise(_join(path, "conditioner"), devices.validate_conditioner,
           cfg.conditioner)
  _reraise(_join(path, "detection_amp"), devices.validate_diff_amp,
           cfg.detection_amp)
  _reraise(_join(path, "coupling"), coupling.validate_pair, cfg.coupling)
  _reraise(_join(path, "detector"), detector.validate_config, cfg.detector)
  _reraise(_join(path, "analysis"), _check_analysis, cfg)


def validate_grid(grid, path="grid"):
  if not grid.freqs or not grid.amplitudes:
    raise errors.ConfigError(
        _join(path, "freqs" if not grid.freqs else "amplitudes"),
        "must not be empty")
  if any(not f > 0 for f in grid.freqs):
    raise errors.ConfigError(_join(path, "freqs"), "must be positive")
  if any(a < 0 for a in grid.amplitudes):
    raise errors.ConfigError(_join(path, "amplitudes"), "must be >= 0")
  if grid.repeats < 1:
    raise errors.ConfigError(_join(path, "repeats"), "must be >= 1")
  if grid.include_no_attack < 0:
    raise errors.ConfigError(_join(path, "include_no_attack"), "must be >= 0")
  if grid.oversample < 2:
    raise errors.ConfigError(_join(path, "oversample"), "must be >= 2")

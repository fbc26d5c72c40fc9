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

"""Command-line front end: calibration, sweeps and detector design reports.

Usage:
  python -m emshield.cli calibrate --config=speaker.json --out=eps.json
  python -m emshield.cli sweep --config=motor.json --out=motor_sweep
  python -m emshield.cli design --pmin=1e-3 --noise_peak=1e-5 --g=100,150
  python -m emshield.cli curve --k_list=2,10,100 --g=1 --epsilon=2 --n=1
  python -m emshield.cli cancel --spacing=0.01 --g=150 --k=10
  python -m emshield.cli preset --preset=motor --out=motor.json

Exit codes: 0 ok, 2 usage or config error, 3 I/O error, 4 a sweep finished
with failed cells (their rows are still written).
"""

from __future__ import absolute_import
from __future__ import division
from __future__ import print_function

import collections
import csv
import functools
import json
import math
import sys

from absl import app
from absl import flags
from absl import logging

from emshield import config
from emshield import detector
from emshield import errors
from emshield import metrics
from emshield import scenarios

FLAGS = flags.FLAGS

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_PARTIAL = 4

COMMANDS = ("calibrate", "sweep", "design", "curve", "cancel", "preset")

SWEEP_COLUMNS = ("f_hz", "amp_v", "seed", "detected", "latency_s", "peak_v",
                 "dc_v", "impact_db", "duty", "error")

flags.DEFINE_string("config", None, "JSON config file with a scenario and an "
                    "optional sweep grid.")
flags.DEFINE_string(
    "out", None,
    "Output path. The sweep command treats it as a prefix and writes"
    " <out>.csv and <out>.json.")
flags.DEFINE_integer("runs", 50, "Number of no-attack runs for calibrate.")
flags.DEFINE_float("margin", 1.5,
                   "Multiplier on the largest no-attack |o| for calibrate.")
flags.DEFINE_float(
    "floor", 1e-6,
    "Smallest epsilon calibrate returns, in volts. Noise-free configs end up"
    " here.")
flags.DEFINE_list("freqs", None,
                  "Sweep carrier frequencies in Hz; overrides the config grid.")
flags.DEFINE_list(
    "amps", None,
    "Sweep peak-to-peak amplitudes in volts; overrides the config grid.")
flags.DEFINE_integer("repeats", None, "Repeats per sweep cell.")
flags.DEFINE_integer("no_attack", None, "Number of no-attack sweep runs.")
flags.DEFINE_integer("seed", None, "Overrides the scenario seed.")
flags.DEFINE_integer(
    "workers", None,
    "Sweep worker threads. Defaults to the CPU count; EMSHIELD_THREADS caps"
    " it. Output does not depend on this value.")
flags.DEFINE_float("pmin", None,
                   "Smallest injected amplitude the design must detect, in V.")
flags.DEFINE_float("noise_peak", 0.0,
                   "Peak noise amplitude at the detector input, in V.")
flags.DEFINE_list(
    "g", None,
    "Detection amplifier gain. design takes a list of candidate gains; curve"
    " and cancel take one.")
flags.DEFINE_float("kmax", 100.0, "Largest coupling ratio design may choose.")
flags.DEFINE_list("k_list", None, "Coupling ratios k for the curve command.")
flags.DEFINE_float("epsilon", None, "Comparator threshold for curve, in V.")
flags.DEFINE_float("n", 0.0, "Noise amplitude for curve, in V.")
flags.DEFINE_float("spacing", None, "Wire spacing for cancel, in meters.")
flags.DEFINE_float("k", None, "Coupling ratio for cancel.")
flags.DEFINE_enum("preset", None, sorted(scenarios.PRESETS),
                  "Scenario preset written by the preset command.")


def _exit_codes(command):
  """Maps the errors a command raises onto the exit-code contract."""

  @functools.wraps(command)
  def wrapper(*args, **kwargs):
    try:
      return command(*args, **kwargs)
    except errors.Infeasible as e:
      sys.stderr.write(
          json.dumps({"error": "Infeasible", "reason": e.reason},
                     sort_keys=True) + "\n")
      return EXIT_USAGE
    except errors.Error as e:
      sys.stderr.write("{}: {}\n".format(type(e).__name__, e))
      return EXIT_USAGE
    except (IOError, OSError) as e:
      sys.stderr.write("I/O error: {}\n".format(e))
      return EXIT_IO

  return wrapper


def _jsonable(value):
  """Recursively replaces non-finite floats, which JSON cannot carry."""
  value = config.to_dict(value)
  if isinstance(value, dict):
    return collections.OrderedDict(
        (key, _jsonable(item)) for key, item in value.items())
  if isinstance(value, list):
    return [_jsonable(item) for item in value]
  if isinstance(value, float) and not math.isfinite(value):
    return metrics.NAN_VAL
  return value


def _write_json(path, data):
  with open(path, "w") as f:
    json.dump(_jsonable(data), f, indent=2, separators=(",", ": "),
              sort_keys=True)
    f.write("\n")


def _cell(value):
  if value is None:
    return metrics.NAN_VAL
  if isinstance(value, bool):
    return int(value)
  if isinstance(value, float) and not math.isfinite(value):
    return metrics.NAN_VAL
  return value


def _write_csv(path, digest, columns, rows):
  """Writes rows under a `# config_hash=` comment line and a header."""
  with open(path, "w", newline="") as f:
    f.write("# config_hash={}\n".format(digest))
    writer = csv.writer(f, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
      writer.writerow([_cell(value) for value in row])


def _floats(values, name):
  try:
    return tuple(float(value) for value in values)
  except (TypeError, ValueError):
    raise errors.ConfigError(name, "expected numbers, got {!r}".format(values))


def _single(values, name):
  if values is None or len(values) != 1:
    raise errors.ConfigError(name, "expected one value, got {!r}".format(
        values))
  return _floats(values, name)[0]


def _require(value, name):
  if value is None:
    raise errors.ConfigError(name, "flag is required")
  return value


@_exit_codes
def cmd_calibrate(config_path, runs, out_path, margin=1.5, floor=1e-6):
  """Calibrates epsilon for the scenario in a config file.

  The no-attack runs use the grid's minimum sample rate when the file has a
  grid, so the threshold matches the sweep's no-attack cells.

  Returns:
    Exit code.
  """
  loaded = config.from_json_file(config_path)
  config.validate_scenario(loaded.scenario)
  grid = loaded.grid
  rate = loaded.scenario.sample_rate
  if grid is not None and grid.min_sample_rate:
    rate = grid.min_sample_rate
  result = scenarios.calibrate_scenario(
      loaded.scenario, runs, margin=margin, floor=floor, sample_rate=rate)
  report = collections.OrderedDict([
      ("config_hash", config.config_hash(loaded.scenario, grid)),
      ("sample_rate", rate),
      ("margin", margin),
      ("floor", floor),
  ])
  report.update(result._asdict())
  _write_json(out_path, report)
  print("calibrate: epsilon={:.6g} V from {} runs{} -> {}".format(
      result.epsilon, result.runs,
      " (floor applied)" if result.floor_applied else "", out_path))
  return EXIT_OK


def _sweep_grid(loaded, freqs, amps, repeats, no_attack):
  grid = loaded.grid
  if grid is None:
    if freqs is None or amps is None:
      raise errors.ConfigError(
          "grid", "the config has no grid; pass --freqs and --amps")
    grid = config.SweepGrid(freqs=(), amplitudes=())
  overrides = {}
  if freqs is not None:
    overrides["freqs"] = _floats(freqs, "freqs")
  if amps is not None:
    overrides["amplitudes"] = _floats(amps, "amps")
  if repeats is not None:
    overrides["repeats"] = repeats
  if no_attack is not None:
    overrides["include_no_attack"] = no_attack
  return grid._replace(**overrides)


def _sweep_rows(report):
  for row in report.rows:
    result = row.result
    if result is None:
      yield (row.f_hz, row.amplitude, row.seed, None, None, None, None, None,
             None, row.error)
      continue
    outcome = result.outcome
    yield (row.f_hz, row.amplitude, row.seed, outcome.detected,
           outcome.latency, outcome.peak, outcome.dc_offset, result.impact_db,
           result.duty_cycle, None)


@_exit_codes
def cmd_sweep(config_path, out_path, freqs=None, amps=None, repeats=None,
              seed=None, no_attack=None, workers=None):
  """Runs a sweep and writes <out_path>.csv rows and a <out_path>.json summary.

  Returns:
    Exit code; EXIT_PARTIAL when any cell failed.
  """
  loaded = config.from_json_file(config_path)
  scenario = loaded.scenario
  if seed is not None:
    scenario = scenario._replace(seed=seed)
  grid = _sweep_grid(loaded, freqs, amps, repeats, no_attack)
  report = scenarios.run_sweep(scenario, grid, workers=workers)
  digest = report.metadata["config_hash"]
  _write_csv(out_path + ".csv", digest, SWEEP_COLUMNS, _sweep_rows(report))
  failed = sum(1 for row in report.rows if row.error is not None)
  summary = collections.OrderedDict([
      ("config_hash", digest),
      ("tpr", report.tpr),
      ("fpr", report.fpr),
      ("num_rows", len(report.rows)),
      ("num_errors", failed),
      ("metadata", report.metadata),
  ])
  _write_json(out_path + ".json", summary)
  print("sweep: {} rows, tpr={}, fpr={}, errors={} -> {}.csv".format(
      len(report.rows), _cell(report.tpr), _cell(report.fpr), failed,
      out_path))
  return EXIT_PARTIAL if failed else EXIT_OK


@_exit_codes
def cmd_design(p_min, noise_peak, g_options, k_max, out_path=None):
  params = detector.design_params(p_min, noise_peak, g_options, k_max)
  inputs = collections.OrderedDict([("p_min", p_min),
                                    ("noise_peak", noise_peak),
                                    ("g_options", list(g_options)),
                                    ("k_max", k_max)])
  report = collections.OrderedDict([("config_hash",
                                     config.canonical_hash(inputs)),
                                    ("inputs", inputs)])
  report.update(params._asdict())
  if out_path:
    _write_json(out_path, report)
  print("design: k={:.6g} g={:.6g} epsilon={:.6g} V".format(*params))
  return EXIT_OK


@_exit_codes
def cmd_curve(k_values, g, epsilon, n, out_path):
  """Writes the minimum detectable amplitude for each k as CSV."""
  curve = detector.min_power_curve(k_values, g, epsilon, n)
  inputs = collections.OrderedDict([("k_values", list(k_values)), ("g", g),
                                    ("epsilon", epsilon), ("n", n)])
  _write_csv(out_path, config.canonical_hash(inputs),
             ("k", "p_min_detectable"), curve)
  print("curve: {} points -> {}".format(len(curve), out_path))
  return EXIT_OK


@_exit_codes
def cmd_cancel(spacing, g, k, out_path=None):
  cancel = detector.cancellation_requirements(spacing, g, k)
  inputs = collections.OrderedDict([("spacing", spacing), ("g", g), ("k", k)])
  report = collections.OrderedDict([("config_hash",
                                     config.canonical_hash(inputs)),
                                    ("inputs", inputs)])
  report.update(cancel._asdict())
  if out_path:
    _write_json(out_path, report)
  print("cancel: f_required={:.6g} Hz power_ratio_required={:.6g}{}".format(
      cancel.f_required, cancel.power_ratio_required,
      " (phase only)" if cancel.phase_only else ""))
  return EXIT_OK


@_exit_codes
def cmd_preset(name, out_path):
  """Writes a preset scenario and its sweep grid as a config file."""
  if name not in scenarios.PRESETS:
    raise errors.ConfigError("preset", "unknown preset {!r}".format(name))
  loaded = config.ConfigFile(
      scenario=scenarios.PRESETS[name](),
      grid=scenarios.SWEEP_GRIDS[scenarios.PRESET_GRIDS[name]])
  with open(out_path, "w") as f:
    f.write(config.to_json_string(loaded))
  print("preset: {} (config_hash={}) -> {}".format(
      name, config.config_hash(loaded.scenario, loaded.grid), out_path))
  return EXIT_OK


def _usage(message):
  sys.stderr.write("{}\nUsage: emshield.cli <{}> [flags]\n".format(
      message, "|".join(COMMANDS)))
  return EXIT_USAGE


def _dispatch(command):
  """Runs `command` with its flags; flag errors become usage errors."""
  try:
    if command == "calibrate":
      return cmd_calibrate(_require(FLAGS.config, "config"), FLAGS.runs,
                           _require(FLAGS.out, "out"), FLAGS.margin,
                           FLAGS.floor)
    if command == "sweep":
      return cmd_sweep(_require(FLAGS.config, "config"),
                       _require(FLAGS.out, "out"), FLAGS.freqs, FLAGS.amps,
                       FLAGS.repeats, FLAGS.seed, FLAGS.no_attack,
                       FLAGS.workers)
    if command == "design":
      return cmd_design(_require(FLAGS.pmin, "pmin"), FLAGS.noise_peak,
                        _floats(_require(FLAGS.g, "g"), "g"), FLAGS.kmax,
                        FLAGS.out)
    if command == "curve":
      return cmd_curve(_floats(_require(FLAGS.k_list, "k_list"), "k_list"),
                       _single(FLAGS.g, "g"),
                       _require(FLAGS.epsilon, "epsilon"), FLAGS.n,
                       _require(FLAGS.out, "out"))
    if command == "cancel":
      return cmd_cancel(_require(FLAGS.spacing, "spacing"),
                        _single(FLAGS.g, "g"), _require(FLAGS.k, "k"),
                        FLAGS.out)
    return cmd_preset(_require(FLAGS.preset, "preset"),
                      _require(FLAGS.out, "out"))
  except errors.ConfigError as e:
    return _usage("Bad flags: {}".format(e))


def parse_flags(argv):
  """Parses flags, exiting with the usage code instead of absl's default 1."""
  try:
    return FLAGS(argv)
  except flags.Error as e:
    sys.exit(_usage("FATAL Flags parsing error: {}".format(e)))


def main(argv):
  logging.set_verbosity(logging.INFO)
  if len(argv) != 2 or argv[1] not in COMMANDS:
    return _usage("Expected exactly one command, got {}".format(argv[1:]))
  return _dispatch(argv[1])


if __name__ == "__main__":
  app.run(main, flags_parser=parse_flags)

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

"""End-to-end reference systems and the sweep engine.

A run synthesizes the legitimate control signal and the attack, couples the
attack into the protected wire pair, and feeds
  * the control wire (legit + primary injection) to the signal conditioner,
  * the tap pair (primary wire, reference wire) to the detection amplifier.
The detector output decides detection; the conditioner output yields the
speaker impact or the motor duty cycle.
"""

from __future__ import absolute_import
from __future__ import division
from __future__ import print_function

import collections
import concurrent.futures
import contextlib
import os
import threading

from absl import logging
import numpy as np

from emshield import config
from emshield import coupling
from emshield import detector
from emshield import devices
from emshield import errors
from emshield import metrics
from emshield import waveform

AttackConfig = config.AttackConfig
AnalysisConfig = config.AnalysisConfig
ScenarioConfig = config.ScenarioConfig
SweepGrid = config.SweepGrid

THREADS_ENV = "EMSHIELD_THREADS"
SAMPLES_ENV = "EMSHIELD_MAX_SAMPLES"

# A run peaks near six float64 arrays of its length.
_BYTES_PER_SAMPLE = 48
# Sample budget when the physical memory size is unknown.
_FALLBACK_SAMPLE_BUDGET = 64 * 2**20

SimulationTraces = collections.namedtuple(
    "SimulationTraces", [
        "legit", "primary_injection", "reference_injection", "drive",
        "detector_output"
    ])

# drive_preview holds min/max/mean/rms of the drive signal over the analysis
# window.
RunResult = collections.namedtuple(
    "RunResult", ["outcome", "impact_db", "duty_cycle", "drive_preview"])

# f_hz and amplitude are None on no-attack rows; amplitude is peak-to-peak.
# Exactly one of result and error is set.
SweepRow = collections.namedtuple(
    "SweepRow", [
        "index", "f_hz", "amplitude", "repeat", "seed", "attack", "result",
        "error"
    ])

SweepReport = collections.namedtuple(
    "SweepReport", ["rows", "tpr", "fpr", "metadata"])

CalibrationResult = collections.namedtuple(
    "CalibrationResult", [
        "epsilon", "runs", "noise_max", "noise_mean_peak", "noise_std",
        "floor_applied"
    ])

# Seed-sequence tags keeping attack, no-attack and calibration runs apart.
_NO_ATTACK_TAG = 0
_ATTACK_TAG = 1
_CALIBRATION_TAG = 2

# Cell rates are rounded up to whole MHz so the settle and analysis windows
# hold whole numbers of samples.
_RATE_STEP = 1e6

_PWM_F = 20e3
_PWM_DUTY = 0.7
_MOTOR_PERIODS = 6


def speaker_preset():
  """LM386-like speaker driver protected by an AD623-like detector.

  The coupling is strongest near 1 MHz and falls off over the wireless band,
  with a second broad mode at 20 MHz. Together with the conditioner's
  parasitic pole, the noise-free impact drops by at least 2 dB per carrier
  step from 1 MHz to 1 GHz, and a 0.3 Vpp carrier stays about 10 dB above
  the noise floor at 1 GHz. The amplifier noise sigmas calibrate to
  epsilon = 2.4 mV and to an impact baseline near -52.7 dB.
  """
  return ScenarioConfig(
      system="speaker",
      legit=waveform.Sine(f=5e3, amplitude_pp=0.2),
      conditioner=devices.CONDITIONER_PRESETS["lm386-like"],
      detection_amp=devices.DIFF_AMP_PRESETS["ad623-like"],
      coupling=coupling.CouplingPair(
          t_c=coupling.TransferFunction(
              broadband_gain=0.6,
              modes=(coupling.Mode(f_res=1e6, q=0.25, peak_gain=1.2),
                     coupling.Mode(f_res=20e6, q=0.25, peak_gain=0.375))),
          k=10.0),
      attack=AttackConfig(
          spec=waveform.Am(
              carrier_f=300e6,
              carrier_amplitude_pp=0.7,
              mod_f=6e3,
              mod_index=0.5),
          onset=0.0),
      detector=detector.DetectorConfig(epsilon=2.4e-3, debounce=1),
      sample_rate=3.2e9,
      duration=4.5e-3,
      seed=0,
      analysis=AnalysisConfig(
          settle=0.5e-3, bandwidth=500.0, f_legit=5e3, f_malicious=6e3))


def speaker_dpi_preset():
  """Speaker with the attack injected directly into the wires."""
  return speaker_preset()._replace(
      coupling=coupling.CouplingPair(t_c=coupling.IDENTITY, k=10.0),
      attack=AttackConfig(spec=waveform.Sine(f=1e6, amplitude_pp=0.1)),
      sample_rate=10e6)


def motor_gate_windows(periods=_MOTOR_PERIODS, f=_PWM_F, duty=_PWM_DUTY):
  """Windows covering the middle fifth of every high interval."""
  period = 1.0 / f
  high = duty * period
  return tuple((i * period + 0.4 * high, i * period + 0.6 * high)
               for i in range(periods))


def motor_preset():
  """DRV8833-like motor driver protected by an AD629-like detector.

  The attack only radiates while the PWM is high, pulling the driver low in
  the middle fifth of every high interval. The detector noise sigma
  calibrates to epsilon = 0.17 mV.
  """
  return ScenarioConfig(
      system="motor",
      legit=waveform.Pwm(
          f=_PWM_F, duty=_PWM_DUTY, v_low=0.0, v_high=3.3, rise_time=100e-9),
      conditioner=devices.CONDITIONER_PRESETS["drv8833-like"],
      detection_amp=devices.DIFF_AMP_PRESETS["ad629-like"],
      coupling=coupling.CouplingPair(
          t_c=coupling.TransferFunction(
              broadband_gain=3.0,
              modes=(coupling.Mode(f_res=45e6, q=3.0, peak_gain=1.0),
                     coupling.Mode(f_res=75e6, q=4.0, peak_gain=0.8))),
          k=10.0),
      attack=AttackConfig(
          spec=waveform.Gated(
              inner=waveform.Sine(f=60e6, amplitude_pp=1.3),
              windows=motor_gate_windows()),
          onset=0.0),
      detector=detector.DetectorConfig(epsilon=0.17e-3, debounce=1),
      sample_rate=600e6,
      duration=_MOTOR_PERIODS / _PWM_F,
      seed=0,
      analysis=AnalysisConfig(settle=1.0 / _PWM_F))


PRESETS = {
    "speaker": speaker_preset,
    "speaker_dpi": speaker_dpi_preset,
    "motor": motor_preset,
}

SWEEP_GRIDS = {
    "speaker_dpi":
        SweepGrid(
            freqs=(1.0, 10.0, 100.0, 1e3, 1e4, 1e5, 1e6, 1e7),
            amplitudes=(0.01, 0.04, 0.07, 0.1),
            repeats=5,
            include_no_attack=20,
            min_sample_rate=1e6),
    "speaker_wireless":
        SweepGrid(
            freqs=(1e6, 2.68e6, 7.2e6, 19.3e6, 51.8e6, 139e6, 373e6, 1e9),
            amplitudes=(0.1, 0.3, 0.5, 0.7),
            repeats=5,
            include_no_attack=100,
            min_sample_rate=1e6),
    "motor":
        SweepGrid(
            freqs=(30e6, 40e6, 50e6, 60e6, 70e6, 80e6, 90e6),
            amplitudes=(0.9, 1.1, 1.3),
            repeats=10,
            include_no_attack=50,
            min_sample_rate=200e6),
}

# Sweep grid that goes with each scenario preset.
PRESET_GRIDS = {
    "speaker": "speaker_wireless",
    "speaker_dpi": "speaker_dpi",
    "motor": "motor",
}


def without_attack(cfg, sample_rate=None):
  """The same scenario with the attack removed, optionally resampled."""
  return cfg._replace(
      attack=None,
      sample_rate=cfg.sample_rate if sample_rate is None else sample_rate)


def _noise(sigma, seed, stream):
  return devices.NoiseModel(sigma, np.random.SeedSequence([seed, stream]))


def _attack_waveform(cfg):
  attack = waveform.synthesize(cfg.attack.spec, cfg.sample_rate, cfg.duration)
  if cfg.attack.onset > 0:
    attack = attack.with_samples(
        np.where(attack.times() >= cfg.attack.onset, attack.samples, 0.0))
  return attack


def _injections(cfg):
  """(primary, reference) wire injections; silence without an attack."""
  if cfg.attack is None:
    silence = waveform.synthesize(waveform.Silence(), cfg.sample_rate,
                                  cfg.duration)
    return silence, silence
  return coupling.couple_pair(_attack_waveform(cfg), cfg.coupling)


def _detector_output(cfg, primary, reference):
  # Both taps carry the legitimate signal, which cancels in the difference.
  return devices.amplify_difference(
      cfg.detection_amp, primary - reference,
      _noise(cfg.detection_amp.noise_sigma, cfg.seed, 0))


def _drive(cfg, legit, primary):
  conditioner_noise = None
  if isinstance(cfg.conditioner, devices.AudioAmp):
    conditioner_noise = _noise(cfg.conditioner.noise_sigma, cfg.seed, 1)
  return devices.conditioner(cfg.conditioner, legit + primary,
                             conditioner_noise)


def simulate(cfg):
  """Runs the signal chain and returns every intermediate trace.

  Args:
    cfg: ScenarioConfig.

  Returns:
    SimulationTraces. Identical configs give bit-identical traces, and the
    same drive and detector output as run_scenario.

  Raises:
    ConfigError: cfg violates an invariant.
  """
  config.validate_scenario(cfg)
  legit = waveform.synthesize(cfg.legit, cfg.sample_rate, cfg.duration)
  primary, reference = _injections(cfg)
  return SimulationTraces(
      legit=legit,
      primary_injection=primary,
      reference_injection=reference,
      drive=_drive(cfg, legit, primary),
      detector_output=_detector_output(cfg, primary, reference))


def _preview(drive):
  samples = drive.samples
  return {
      "min_v": float(np.min(samples)),
      "max_v": float(np.max(samples)),
      "mean_v": float(np.mean(samples)),
      "rms_v": float(np.sqrt(np.mean(samples * samples))),
  }


def run_scenario(cfg):
  """Simulates one scenario and evaluates detection and impact.

  Traces are dropped as soon as they are measured, so a run holds a few
  full-rate arrays at a time instead of every intermediate trace.

  Returns:
    RunResult with impact_db for speakers and duty_cycle for motors.
  """
  config.validate_scenario(cfg)
  analysis = cfg.analysis
  primary, reference = _injections(cfg)
  output = _detector_output(cfg, primary, reference)
  del reference
  onset = None if cfg.attack is None else cfg.attack.onset
  outcome = detector.detect(
      output, cfg.detector, attack_onset=onset, analysis_start=analysis.settle)
  del output
  legit = waveform.synthesize(cfg.legit, cfg.sample_rate, cfg.duration)
  drive = _drive(cfg, legit, primary).segment(analysis.settle)
  del legit, primary
  impact = duty = None
  if cfg.system == "speaker":
    impact = waveform.impact_db(drive, analysis.f_legit, analysis.f_malicious,
                                analysis.bandwidth)
  else:
    midpoint = 0.5 * (cfg.conditioner.v_low + cfg.conditioner.v_high)
    duty = waveform.duty_cycle(drive, midpoint)
  return RunResult(
      outcome=outcome,
      impact_db=impact,
      duty_cycle=duty,
      drive_preview=_preview(drive))


def resolve_workers(requested=None):
  """Worker count: requested or the CPU count, capped by EMSHIELD_THREADS."""
  workers = requested or os.cpu_count() or 1
  cap = _positive_env(THREADS_ENV)
  if cap is not None:
    workers = min(workers, cap)
  return max(1, workers)


def resolve_sample_budget():
  """Total samples that concurrent sweep cells may hold.

  EMSHIELD_MAX_SAMPLES when set, otherwise as many samples as fit in half of
  the physical memory.
  """
  budget = _positive_env(SAMPLES_ENV)
  if budget is not None:
    return budget
  try:
    memory = os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
  except (AttributeError, ValueError, OSError):
    return _FALLBACK_SAMPLE_BUDGET
  return max(1, memory // (2 * _BYTES_PER_SAMPLE))


def _positive_env(name):
  value = os.environ.get(name)
  if value is None:
    return None
  try:
    value = int(value)
  except ValueError:
    value = 0
  if value < 1:
    raise errors.ConfigError(name, "must be a positive integer")
  return value


class _SampleBudget(object):
  """Admits sweep cells while their summed sample counts fit a limit.

  A cell larger than the whole limit still runs, alone.
  """

  def __init__(self, limit):
    self._limit = limit
    self._in_use = 0
    self._changed = threading.Condition()

  @contextlib.contextmanager
  def hold(self, samples):
    with self._changed:
      while self._in_use and self._in_use + samples > self._limit:
        self._changed.wait()
      self._in_use += samples
    try:
      yield
    finally:
      with self._changed:
        self._in_use -= samples
        self._changed.notify_all()


def snap_frequency(f, bin_hz):
  """Nearest positive multiple of bin_hz."""
  return max(1, int(round(f / bin_hz))) * bin_hz


def _analysis_window(cfg):
  """Analytics window length, rounded to whole picoseconds."""
  return round(cfg.duration - cfg.analysis.settle, 12)


def _round_rate(rate):
  return float(np.ceil(rate / _RATE_STEP - 1e-9) * _RATE_STEP)


def _cell_seed(seed, tag, fi, ai, repeat):
  state = np.random.SeedSequence([seed, tag, fi, ai, repeat]).generate_state(1)
  return int(state[0])


_Cell = collections.namedtuple(
    "_Cell", ["index", "f_hz", "amplitude", "repeat", "cfg"])


def _cells(base, grid):
  """Expands a grid into cells in row order."""
  window = _analysis_window(base)
  min_rate = grid.min_sample_rate or base.sample_rate
  legit_f = waveform.max_frequency(base.legit)
  cells = []
  for fi, requested in enumerate(grid.freqs):
    f = snap_frequency(requested, 1.0 / window)
    for ai, amplitude in enumerate(grid.amplitudes):
      spec = waveform.with_carrier(base.attack.spec, f, amplitude)
      highest = max(legit_f, waveform.max_frequency(spec))
      for repeat in range(grid.repeats):
        cfg = base._replace(
            attack=base.attack._replace(spec=spec),
            sample_rate=max(min_rate, _round_rate(grid.oversample * highest)),
            seed=_cell_seed(base.seed, _ATTACK_TAG, fi, ai, repeat))
        cells.append(_Cell(len(cells), f, amplitude, repeat, cfg))
  for repeat in range(grid.include_no_attack):
    cfg = without_attack(base, min_rate)._replace(
        seed=_cell_seed(base.seed, _NO_ATTACK_TAG, 0, 0, repeat))
    cells.append(_Cell(len(cells), None, None, repeat, cfg))
  return cells


def _cell_samples(cfg):
  return int(np.ceil(cfg.sample_rate * cfg.duration - 1e-9))


def _run_cell(cell, budget):
  result = error = None
  try:
    with budget.hold(_cell_samples(cell.cfg)):
      result = run_scenario(cell.cfg)
  except errors.Error as e:
    logging.warning("Sweep cell %d failed: %s", cell.index, e)
    error = "{}: {}".format(type(e).__name__, e)
  return SweepRow(
      index=cell.index,
      f_hz=cell.f_hz,
      amplitude=cell.amplitude,
      repeat=cell.repeat,
      seed=cell.cfg.seed,
      attack=cell.cfg.attack is not None,
      result=result,
      error=error)


def run_sweep(base, grid, workers=None):
  """Runs a scenario over a frequency x amplitude x repeat grid.

  Cells run concurrently but rows come back in grid order: attack cells by
  (frequency, amplitude, repeat), then the no-attack cells. Every cell seeds
  its noise from (base.seed, frequency index, amplitude index, repeat), so the
  report does not depend on the worker count.

  Args:
    base: ScenarioConfig with an attack whose carrier the grid retunes.
    grid: SweepGrid. Amplitudes are peak-to-peak volts.
    workers: Thread count; None uses the CPU count. EMSHIELD_THREADS caps it.

  Concurrent cells share a sample budget (see resolve_sample_budget), so
  high-rate cells queue instead of exhausting memory.

  Returns:
    SweepReport. Cells that raised are kept as rows with `error` set.

  Raises:
    ConfigError: base or grid is invalid.
  """
  config.validate_scenario(base)
  config.validate_grid(grid)
  if base.attack is None:
    raise errors.ConfigError("scenario.attack", "a sweep needs an attack")
  cells = _cells(base, grid)
  workers = resolve_workers(workers)
  limit = resolve_sample_budget()
  budget = _SampleBudget(limit)
  logging.info("Running %d sweep cells on %d workers, %d samples at most",
               len(cells), workers, limit)
  rows = [None] * len(cells)
  with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
    futures = {
        pool.submit(_run_cell, cell, budget): cell.index for cell in cells
    }
    for done, future in enumerate(concurrent.futures.as_completed(futures), 1):
      rows[futures[future]] = future.result()
      logging.log_every_n(logging.INFO, "Finished %d/%d sweep cells", 10,
                          done, len(cells))
  window = _analysis_window(base)
  snapped = []
  for cell in cells:
    if cell.f_hz is not None and cell.f_hz not in snapped:
      snapped.append(cell.f_hz)
  rates = metrics.compute_detection_rates(rows)
  metadata = collections.OrderedDict([
      ("config_hash", config.config_hash(base, grid)),
      ("requested_freqs", list(grid.freqs)),
      ("snapped_freqs", snapped),
      ("bin_hz", 1.0 / window),
      ("settle_s", base.analysis.settle),
      ("analysis_window_s", window),
      ("no_attack_sample_rate", grid.min_sample_rate or base.sample_rate),
      ("metrics", metrics.get_sweep_metrics(rows)),
      ("per_frequency", metrics.per_frequency_summary(rows)),
  ])
  return SweepReport(rows=rows, tpr=rates.tpr, fpr=rates.fpr,
                     metadata=metadata)


def calibrate_scenario(cfg, runs, margin=1.5, floor=0.0, sample_rate=None):
  """Sets epsilon from no-attack runs of a scenario.

  Args:
    cfg: ScenarioConfig; its attack is ignored.
    runs: Number of no-attack runs.
    margin: Multiplier on the largest observed |o|.
    floor: Smallest epsilon returned, in volts.
    sample_rate: Rate for the runs; None keeps cfg.sample_rate. Use the rate
      of the sweep's no-attack cells so the noise peak statistics match.

  Returns:
    CalibrationResult.
  """
  if runs < 1:
    raise errors.EmptyCalibration("need at least one run, got {}".format(runs))
  outputs = []
  for repeat in range(runs):
    run_cfg = without_attack(cfg, sample_rate)._replace(
        seed=_cell_seed(cfg.seed, _CALIBRATION_TAG, 0, 0, repeat))
    outputs.append(simulate(run_cfg).detector_output)
  epsilon = detector.calibrate_threshold(outputs, margin)
  peaks = np.array([np.max(np.abs(o.samples)) for o in outputs])
  floor_applied = epsilon < floor
  if floor_applied:
    logging.warning("Calibrated epsilon %.6g V is below the floor %.6g V",
                    epsilon, floor)
    epsilon = floor
  return CalibrationResult(
      epsilon=float(epsilon),
      runs=runs,
      noise_max=float(np.max(peaks)),
      noise_mean_peak=float(np.mean(peaks)),
      noise_std=float(np.mean([np.std(o.samples) for o in outputs])),
      floor_applied=bool(floor_applied))

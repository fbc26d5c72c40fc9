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

"""Tests for scenarios.py."""

from __future__ import absolute_import
from __future__ import division
from __future__ import print_function

import collections
import concurrent.futures
import os
import threading
import time
from unittest import mock

from absl.testing import absltest
import numpy as np
from scipy import stats

from emshield import config
from emshield import coupling
from emshield import detector
from emshield import devices
from emshield import errors
from emshield import metrics
from emshield import scenarios
from emshield import waveform

_BASELINE_DB = -52.7


def _quiet(cfg):
  """Removes both noise sources."""
  return cfg._replace(
      conditioner=cfg.conditioner._replace(noise_sigma=0.0)
      if isinstance(cfg.conditioner, devices.AudioAmp) else cfg.conditioner,
      detection_amp=cfg.detection_amp._replace(noise_sigma=0.0))


def _speaker_at(carrier_f, amplitude_pp=0.7):
  cfg = scenarios.speaker_preset()
  spec = waveform.with_carrier(cfg.attack.spec, carrier_f, amplitude_pp)
  return cfg._replace(
      attack=cfg.attack._replace(spec=spec), sample_rate=11 * carrier_f)


class PresetTest(absltest.TestCase):

  def test_presets_validate(self):
    for name, preset in scenarios.PRESETS.items():
      config.validate_scenario(preset())
      grid = scenarios.SWEEP_GRIDS[scenarios.PRESET_GRIDS[name]]
      config.validate_grid(grid)

  def test_speaker_legit_is_five_kilohertz_sine(self):
    self.assertEqual(scenarios.speaker_preset().legit,
                     waveform.Sine(f=5e3, amplitude_pp=0.2))

  def test_motor_attack_band(self):
    freqs = scenarios.SWEEP_GRIDS["motor"].freqs
    self.assertEqual((min(freqs), max(freqs)), (30e6, 90e6))
    self.assertBetween(scenarios.motor_preset().attack.spec.inner.f, 30e6,
                       90e6)

  def test_motor_gates_cover_a_fifth_of_the_high_time(self):
    cfg = scenarios.motor_preset()
    gated = sum(end - start for start, end in cfg.attack.spec.windows)
    high = cfg.legit.duty * cfg.duration
    self.assertAlmostEqual(gated / high, 0.2)


class RunScenarioTest(absltest.TestCase):

  def test_speaker_without_attack(self):
    cfg = scenarios.without_attack(scenarios.speaker_preset(), 1e6)
    impacts = []
    for seed in range(20):
      result = scenarios.run_scenario(cfg._replace(seed=seed))
      self.assertFalse(result.outcome.detected)
      self.assertIsNone(result.duty_cycle)
      impacts.append(result.impact_db)
    self.assertAlmostEqual(
        metrics.mean_impact_db(impacts), _BASELINE_DB, delta=3.0)

  def test_speaker_am_attack(self):
    cfg = _speaker_at(20e6)
    result = scenarios.run_scenario(cfg)
    self.assertTrue(result.outcome.detected)
    self.assertGreater(result.outcome.dc_offset, cfg.detector.epsilon)
    self.assertGreater(result.impact_db, _BASELINE_DB + 20.0)
    drive = scenarios.simulate(cfg).drive.segment(cfg.analysis.settle)
    spike = waveform.band_power(drive, 6e3, 500.0)
    self.assertGreater(spike, 100.0 * waveform.band_power(drive, 7e3, 500.0))

  def test_motor_gated_attack(self):
    cfg = scenarios.motor_preset()
    result = scenarios.run_scenario(cfg)
    self.assertTrue(result.outcome.detected)
    self.assertIsNone(result.impact_db)
    gated_fraction = 0.2 * cfg.legit.duty
    self.assertAlmostEqual(
        result.duty_cycle, cfg.legit.duty - gated_fraction,
        delta=0.05 * cfg.legit.duty)

  def test_motor_without_attack_keeps_duty(self):
    cfg = scenarios.without_attack(scenarios.motor_preset())
    result = scenarios.run_scenario(cfg)
    self.assertFalse(result.outcome.detected)
    self.assertAlmostEqual(result.duty_cycle, cfg.legit.duty, delta=1e-3)

  def test_simulate_is_deterministic(self):
    cfg = scenarios.without_attack(scenarios.speaker_preset(), 1e6)
    first = scenarios.simulate(cfg)
    second = scenarios.simulate(cfg)
    np.testing.assert_array_equal(first.detector_output.samples,
                                  second.detector_output.samples)
    np.testing.assert_array_equal(first.drive.samples, second.drive.samples)
    other = scenarios.simulate(cfg._replace(seed=1))
    self.assertFalse(
        np.array_equal(first.detector_output.samples,
                       other.detector_output.samples))

  def test_run_matches_simulate(self):
    cfg = _speaker_at(2e6)
    result = scenarios.run_scenario(cfg)
    traces = scenarios.simulate(cfg)
    settle = cfg.analysis.settle
    self.assertEqual(
        result.outcome,
        detector.detect(traces.detector_output, cfg.detector,
                        attack_onset=0.0, analysis_start=settle))
    self.assertEqual(
        result.impact_db,
        waveform.impact_db(traces.drive.segment(settle), 5e3, 6e3, 500.0))

  def test_attack_before_onset_is_silent(self):
    cfg = _speaker_at(1e6)
    cfg = cfg._replace(
        attack=cfg.attack._replace(onset=1e-3),
        coupling=coupling.CouplingPair(t_c=coupling.IDENTITY, k=10.0))
    traces = scenarios.simulate(_quiet(cfg))
    head = traces.primary_injection.samples[:int(0.9e-3 * cfg.sample_rate)]
    self.assertTrue(np.all(head == 0.0))

  def test_config_errors_name_the_field(self):
    cfg = scenarios.speaker_preset()._replace(sample_rate=1e6)
    with self.assertRaises(errors.ConfigError) as ctx:
      scenarios.run_scenario(cfg)
    self.assertEqual(ctx.exception.path, "scenario.attack.spec")
    cfg = scenarios.speaker_preset()._replace(
        conditioner=devices.CONDITIONER_PRESETS["drv8833-like"])
    with self.assertRaises(errors.ConfigError) as ctx:
      scenarios.run_scenario(cfg)
    self.assertEqual(ctx.exception.path, "scenario.conditioner")


class SweepTest(absltest.TestCase):

  def setUp(self):
    super(SweepTest, self).setUp()
    self.base = _quiet(scenarios.speaker_preset())

  def test_frequencies_are_snapped(self):
    grid = scenarios.SweepGrid(
        freqs=(1.0, 1e6 + 100.0), amplitudes=(0.5,), min_sample_rate=1e6)
    report = scenarios.run_sweep(self.base, grid)
    self.assertEqual(report.metadata["snapped_freqs"], [250.0, 1e6])
    self.assertEqual(report.metadata["bin_hz"], 250.0)
    self.assertEqual([row.f_hz for row in report.rows], [250.0, 1e6])

  def test_report_independent_of_workers(self):
    base = scenarios.speaker_preset()
    grid = scenarios.SweepGrid(
        freqs=(1e6, 3e6),
        amplitudes=(0.1, 0.7),
        repeats=2,
        include_no_attack=3,
        min_sample_rate=1e6)
    reports = [
        scenarios.run_sweep(base, grid, workers=workers)
        for workers in (1, 4, 16)
    ]
    for report in reports[1:]:
      self.assertEqual(report.rows, reports[0].rows)
      self.assertEqual(report.metadata, reports[0].metadata)
    self.assertEqual([row.attack for row in reports[0].rows],
                     [True] * 8 + [False] * 3)
    self.assertLen(set(row.seed for row in reports[0].rows), 11)

  def test_report_independent_of_sample_budget(self):
    grid = scenarios.SweepGrid(
        freqs=(1e6, 3e6), amplitudes=(0.3,), include_no_attack=2,
        min_sample_rate=1e6)
    free = scenarios.run_sweep(self.base, grid, workers=4)
    with mock.patch.dict(os.environ, {scenarios.SAMPLES_ENV: "1"}):
      serial = scenarios.run_sweep(self.base, grid, workers=4)
    self.assertEqual(serial.rows, free.rows)
    self.assertEqual(serial.metadata, free.metadata)

  def test_false_positive_rate_with_calibrated_threshold(self):
    base = scenarios.speaker_preset()
    calibration = scenarios.calibrate_scenario(
        base, runs=50, margin=1.5, sample_rate=1e6)
    base = base._replace(
        detector=base.detector._replace(epsilon=calibration.epsilon))
    grid = scenarios.SweepGrid(
        freqs=(1e6,), amplitudes=(0.1,), include_no_attack=100,
        min_sample_rate=1e6)
    report = scenarios.run_sweep(base, grid)
    self.assertEqual(report.fpr, 0.0)
    self.assertEqual(report.tpr, 1.0)

  def test_failed_cells_become_error_rows(self):
    # No-attack cells run at the minimum rate, too slow for the 5 kHz tone.
    grid = scenarios.SweepGrid(
        freqs=(1e6,), amplitudes=(0.5,), include_no_attack=2,
        min_sample_rate=20e3)
    report = scenarios.run_sweep(self.base, grid)
    attack_row, first, second = report.rows
    self.assertIsNone(attack_row.error)
    for row in (first, second):
      self.assertIsNone(row.result)
      self.assertStartsWith(row.error, "ConfigError")
    self.assertEqual(report.fpr, metrics.NAN_VAL)
    self.assertEqual(report.metadata["metrics"][metrics.NUM_ERRORS], 2)

  def test_sweep_needs_an_attack(self):
    grid = scenarios.SWEEP_GRIDS["speaker_wireless"]
    with self.assertRaises(errors.ConfigError):
      scenarios.run_sweep(scenarios.without_attack(self.base), grid)

  def test_config_hash_in_metadata(self):
    grid = scenarios.SweepGrid(
        freqs=(1e6,), amplitudes=(0.5,), min_sample_rate=1e6)
    report = scenarios.run_sweep(self.base, grid)
    self.assertEqual(report.metadata["config_hash"],
                     config.config_hash(self.base, grid))


class ShippedGridTest(absltest.TestCase):
  """Full preset grids with thresholds calibrated from no-attack runs."""

  def _calibrated(self, base, sample_rate):
    calibration = scenarios.calibrate_scenario(
        base, runs=50, margin=1.5, sample_rate=sample_rate)
    return base._replace(
        detector=base.detector._replace(epsilon=calibration.epsilon))

  def test_speaker_wireless_grid(self):
    grid = scenarios.SWEEP_GRIDS["speaker_wireless"]
    base = self._calibrated(scenarios.speaker_preset(), grid.min_sample_rate)
    report = scenarios.run_sweep(base, grid)
    self.assertLen(report.rows, 8 * 4 * 5 + 100)
    self.assertEqual([row for row in report.rows if row.error], [])
    self.assertEqual(report.fpr, 0.0)
    impacts = collections.defaultdict(list)
    detected = collections.defaultdict(list)
    for row in report.rows:
      if not row.attack:
        continue
      impacts[(row.f_hz, row.amplitude)].append(row.result.impact_db)
      detected[row.amplitude].append(row.result.outcome.detected)
      if row.result.impact_db > _BASELINE_DB + 6.0:
        self.assertTrue(row.result.outcome.detected)
    mean = {key: metrics.mean_impact_db(values)
            for key, values in impacts.items()}
    for f in grid.freqs:
      by_amplitude = [mean[(f, a)] for a in grid.amplitudes]
      self.assertEqual(by_amplitude, sorted(by_amplitude), msg=str(f))
    for a in grid.amplitudes[1:]:
      by_frequency = [mean[(f, a)] for f in grid.freqs]
      self.assertLessEqual(
          stats.spearmanr(grid.freqs, by_frequency).correlation, -0.8,
          msg=str(a))
      self.assertGreater(mean[(1e9, a)], _BASELINE_DB + 6.0, msg=str(a))
      self.assertTrue(all(detected[a]), msg=str(a))
    self.assertLessEqual(report.metadata["metrics"][metrics.IMPACT_TREND],
                         -0.8)

  def test_motor_grid(self):
    grid = scenarios.SWEEP_GRIDS["motor"]
    base = self._calibrated(scenarios.motor_preset(), grid.min_sample_rate)
    self.assertBetween(base.detector.epsilon, 0.14e-3, 0.20e-3)
    report = scenarios.run_sweep(base, grid)
    attack_rows = [row for row in report.rows if row.attack]
    self.assertLen(attack_rows, 210)
    self.assertLen(report.rows, 260)
    self.assertEqual(report.tpr, 1.0)
    self.assertEqual(report.fpr, 0.0)
    duty = base.legit.duty
    for row in attack_rows:
      self.assertAlmostEqual(
          row.result.duty_cycle, duty - 0.2 * duty, delta=0.05 * duty,
          msg="{} Hz, {} V".format(row.f_hz, row.amplitude))


class CalibrateScenarioTest(absltest.TestCase):

  def test_speaker_threshold(self):
    result = scenarios.calibrate_scenario(
        scenarios.speaker_preset(), runs=50, margin=1.5, sample_rate=1e6)
    self.assertBetween(result.epsilon, 2.0e-3, 2.9e-3)
    self.assertFalse(result.floor_applied)
    self.assertAlmostEqual(result.epsilon, 1.5 * result.noise_max)

  def test_motor_threshold(self):
    result = scenarios.calibrate_scenario(
        scenarios.motor_preset(), runs=50, margin=1.5, sample_rate=200e6)
    self.assertBetween(result.epsilon, 0.14e-3, 0.20e-3)

  def test_noise_free_uses_floor(self):
    result = scenarios.calibrate_scenario(
        _quiet(scenarios.speaker_preset()), runs=2, floor=1e-4,
        sample_rate=1e6)
    self.assertTrue(result.floor_applied)
    self.assertEqual(result.epsilon, 1e-4)


class WorkersTest(absltest.TestCase):

  def test_env_caps_workers(self):
    with mock.patch.dict(os.environ, {scenarios.THREADS_ENV: "2"}):
      self.assertEqual(scenarios.resolve_workers(8), 2)
      self.assertEqual(scenarios.resolve_workers(1), 1)

  def test_bad_env(self):
    with mock.patch.dict(os.environ, {scenarios.THREADS_ENV: "zero"}):
      with self.assertRaises(errors.ConfigError):
        scenarios.resolve_workers(4)

  def test_sample_budget_from_env(self):
    with mock.patch.dict(os.environ, {scenarios.SAMPLES_ENV: "1000"}):
      self.assertEqual(scenarios.resolve_sample_budget(), 1000)
    with mock.patch.dict(os.environ, {scenarios.SAMPLES_ENV: "-5"}):
      with self.assertRaises(errors.ConfigError):
        scenarios.resolve_sample_budget()
    with mock.patch.dict(os.environ):
      os.environ.pop(scenarios.SAMPLES_ENV, None)
      self.assertGreater(scenarios.resolve_sample_budget(), 0)

  def test_sample_budget_bounds_concurrent_cells(self):
    budget = scenarios._SampleBudget(10)
    lock = threading.Lock()
    held = []
    totals = []

    def hold(samples):
      with budget.hold(samples):
        with lock:
          held.append(samples)
          totals.append(sum(held))
        time.sleep(0.02)
        with lock:
          held.remove(samples)

    with concurrent.futures.ThreadPoolExecutor(max_workers=5) as pool:
      list(pool.map(hold, [6, 6, 3, 20, 4]))
    self.assertLen(totals, 5)
    for total in totals:
      # A cell above the whole budget runs alone.
      self.assertTrue(total <= 10 or total == 20, msg=str(totals))

  def test_snap_frequency(self):
    self.assertEqual(scenarios.snap_frequency(1.0, 250.0), 250.0)
    self.assertEqual(scenarios.snap_frequency(1001.0, 250.0), 1000.0)


if __name__ == "__main__":
  absltest.main()

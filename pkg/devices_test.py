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

"""Tests for devices.py."""

from __future__ import absolute_import
from __future__ import division
from __future__ import print_function

from absl.testing import absltest
from absl.testing import parameterized
import numpy as np

from emshield import coupling
from emshield import devices
from emshield import errors
from emshield import scenarios
from emshield import waveform

_AMP = devices.DiffAmpModel(
    gain=150.0, f_max=10e3, a2=5.0, feedback_exponent=2, f_parasitic=5e9,
    rails=100.0, noise_sigma=0.0)


def _sine(f, amplitude, rate, duration, phase=0.0):
  return waveform.synthesize(
      waveform.Sine(f=f, amplitude_pp=2.0 * amplitude, phase=phase), rate,
      duration)


def _settled(w):
  return w.samples[len(w) // 2:]


class DiffAmpTest(parameterized.TestCase):

  def test_identical_inputs_give_zero(self):
    w = _sine(1e3, 0.3, 1e6, 5e-3)
    out = devices.diffamp(_AMP, w, w, devices.NoiseModel(0.0, 1))
    self.assertTrue(np.all(out.samples == 0.0))

  def test_in_band_gain(self):
    v_plus = _sine(1e3, 1e-3, 1e6, 10e-3)
    v_minus = waveform.synthesize(waveform.Silence(), 1e6, 10e-3)
    out = devices.diffamp(_AMP, v_plus, v_minus)
    self.assertAlmostEqual(np.max(np.abs(_settled(out))), 0.150, delta=0.003)

  @parameterized.parameters(10.0, 20.0, 50.0, 100.0, 200.0, 300.0, 500.0,
                            1000.0)
  def test_output_peak_follows_gain_and_k(self, f):
    k = 10.0
    for amplitude in np.logspace(-7, -2, 6):
      primary = _sine(f, amplitude, 40e3, 0.4)
      reference = primary.with_samples(primary.samples / k)
      out = devices.diffamp(_AMP, primary, reference)
      expected = _AMP.gain * (k - 1.0) / k * amplitude
      self.assertAlmostEqual(
          np.max(np.abs(_settled(out))) / expected, 1.0, delta=0.02,
          msg=str(amplitude))

  def test_difference_input_matches_pair(self):
    v_plus = _sine(200e3, 0.02, 4e6, 2e-3)
    v_minus = v_plus.scaled(0.1)
    noise = devices.NoiseModel(1e-3, 5)
    np.testing.assert_array_equal(
        devices.diffamp(_AMP, v_plus, v_minus, noise).samples,
        devices.amplify_difference(_AMP, v_plus - v_minus, noise).samples)

  def test_out_of_band_rectifies(self):
    amplitude = 0.01
    v_plus = _sine(100 * _AMP.f_max, amplitude, 20e6, 2e-3)
    v_minus = v_plus.with_samples(np.zeros(len(v_plus)))
    out = devices.diffamp(_AMP, v_plus, v_minus)
    tail = waveform.Waveform(_settled(out), out.sample_rate)
    self.assertLess(waveform.peak_amplitude(tail),
                    0.05 * _AMP.gain * amplitude)
    self.assertAlmostEqual(
        waveform.mean_offset(tail) / (_AMP.a2 * amplitude**2 / 2.0), 1.0,
        delta=0.1)

  def test_dc_monotone_in_amplitude(self):
    offsets = []
    for amplitude in (0.001, 0.003, 0.01, 0.03, 0.1):
      v_plus = _sine(20 * _AMP.f_max, amplitude, 4e6, 4e-3)
      v_minus = v_plus.with_samples(np.zeros(len(v_plus)))
      offsets.append(np.mean(_settled(devices.diffamp(_AMP, v_plus,
                                                       v_minus))))
    self.assertEqual(offsets, sorted(offsets))

  def test_rails_clamp(self):
    model = _AMP._replace(rails=1.0)
    v_plus = _sine(1e3, 0.5, 1e6, 5e-3)
    v_minus = v_plus.with_samples(np.zeros(len(v_plus)))
    out = devices.diffamp(model, v_plus, v_minus)
    self.assertLessEqual(np.max(np.abs(out.samples)), 1.0)
    self.assertEqual(np.max(out.samples), 1.0)

  def test_noise_is_seeded(self):
    w = _sine(1e3, 1e-3, 1e6, 2e-3)
    zero = w.with_samples(np.zeros(len(w)))
    first = devices.diffamp(_AMP, w, zero, devices.NoiseModel(1e-3, 42))
    second = devices.diffamp(_AMP, w, zero, devices.NoiseModel(1e-3, 42))
    other = devices.diffamp(_AMP, w, zero, devices.NoiseModel(1e-3, 43))
    np.testing.assert_array_equal(first.samples, second.samples)
    self.assertFalse(np.array_equal(first.samples, other.samples))

  def test_mismatches(self):
    a = _sine(1e3, 1e-3, 1e6, 2e-3)
    with self.assertRaises(errors.RateMismatch):
      devices.diffamp(_AMP, a, _sine(1e3, 1e-3, 2e6, 1e-3))
    with self.assertRaises(errors.LengthMismatch):
      devices.diffamp(_AMP, a, _sine(1e3, 1e-3, 1e6, 3e-3))
    slow = _sine(1e3, 1e-3, 30e3, 2e-3)
    with self.assertRaises(errors.RateMismatch):
      devices.diffamp(_AMP, slow, slow)


class RectifiedDcTest(absltest.TestCase):

  def test_zero_frequency(self):
    self.assertEqual(devices.rectified_dc_estimate(_AMP, 0.0, 0.1), 0.0)

  def test_half_at_f_max(self):
    self.assertAlmostEqual(
        devices.rectified_dc_estimate(_AMP, _AMP.f_max, 0.1),
        _AMP.a2 * 0.01 / 4.0, delta=1e-9)

  def test_parasitic_decay(self):
    plateau = _AMP.a2 * 0.01 / 2.0
    self.assertLess(
        devices.rectified_dc_estimate(_AMP, 100 * _AMP.f_parasitic, 0.1),
        0.01 * plateau)

  def test_matches_time_domain(self):
    model = devices.DIFF_AMP_PRESETS["ad623-like"]
    f, amplitude = 200e3, 0.02
    v_plus = _sine(f, amplitude, 4e6, 5e-3)
    v_minus = v_plus.with_samples(np.zeros(len(v_plus)))
    measured = np.mean(_settled(devices.diffamp(model, v_plus, v_minus)))
    estimate = devices.rectified_dc_estimate(model, f, amplitude)
    self.assertAlmostEqual(measured / estimate, 1.0, delta=0.1)


class FindCrossingsTest(absltest.TestCase):

  def setUp(self):
    super(FindCrossingsTest, self).setUp()
    self.model = devices.DIFF_AMP_PRESETS["ad623-like"]

  def test_no_gap_on_speaker_amplifier(self):
    crossings = devices.find_crossings(self.model, 0.05, 2.4e-3)
    self.assertLess(crossings.f_dc_eps, crossings.f_pk_eps)
    self.assertAlmostEqual(
        devices.linear_peak_estimate(self.model, crossings.f_pk_eps, 0.05),
        2.4e-3, delta=2.4e-3 * 0.005)
    self.assertAlmostEqual(
        devices.rectified_dc_estimate(self.model, crossings.f_dc_eps, 0.05),
        2.4e-3, delta=2.4e-3 * 0.005)

  def test_no_gap_over_speaker_grid(self):
    cfg = scenarios.speaker_preset()
    grid = scenarios.SWEEP_GRIDS["speaker_wireless"]
    gains = coupling.magnitude(cfg.coupling.t_c, np.array(grid.freqs))
    split = 0.5 * (1.0 - 1.0 / cfg.coupling.k)
    weakest = split * min(grid.amplitudes) * np.min(gains)
    strongest = split * max(grid.amplitudes) * np.max(gains)
    for amplitude in np.geomspace(weakest, strongest, 25):
      crossings = devices.find_crossings(self.model, amplitude,
                                         cfg.detector.epsilon)
      self.assertLess(crossings.f_dc_eps, crossings.f_pk_eps,
                      msg=str(amplitude))

  def test_epsilon_above_in_band_peak(self):
    with self.assertRaises(errors.NoCrossing) as ctx:
      devices.find_crossings(self.model, 1e-3, 1.0)
    self.assertEqual(ctx.exception.which, "peak")

  def test_dc_never_crosses(self):
    weak = self.model._replace(a2=1e-6)
    with self.assertRaises(errors.NoCrossing) as ctx:
      devices.find_crossings(weak, 1e-3, 2.4e-3)
    self.assertEqual(ctx.exception.which, "dc")

  def test_doubling_amplitude_lowers_dc_crossing(self):
    single = devices.find_crossings(self.model, 0.02, 2.4e-3)
    double = devices.find_crossings(self.model, 0.04, 2.4e-3)
    self.assertLess(double.f_dc_eps, single.f_dc_eps)


class ConditionerTest(absltest.TestCase):

  def setUp(self):
    super(ConditionerTest, self).setUp()
    self.audio = devices.CONDITIONER_PRESETS["lm386-like"]._replace(
        noise_sigma=0.0)

  def _speaker_input(self, attack_pp, rate=20e6, duration=6e-3):
    components = [waveform.Sine(f=5e3, amplitude_pp=0.2)]
    if attack_pp:
      components.append(
          waveform.Am(carrier_f=2e6, carrier_amplitude_pp=attack_pp,
                      mod_f=6e3, mod_index=0.5))
    return waveform.synthesize(
        waveform.Sum(components=tuple(components)), rate, duration)

  def test_audio_amp_linear_in_band(self):
    out = devices.conditioner(self.audio, self._speaker_input(0.0, rate=2e6))
    tail = out.segment(2e-3)
    expected = 20.0 * 0.1 * devices.lowpass_magnitude(5e3, 20e3)
    self.assertAlmostEqual(waveform.peak_amplitude(tail) / expected, 1.0,
                           delta=0.01)
    self.assertLess(waveform.impact_db(tail, 5e3, 6e3, 500.0), -100.0)

  def test_audio_amp_demodulates_am(self):
    impacts = []
    for attack_pp in (0.1, 0.3, 0.5, 0.7):
      out = devices.conditioner(self.audio, self._speaker_input(attack_pp))
      impacts.append(waveform.impact_db(out.segment(2e-3), 5e3, 6e3, 500.0))
    self.assertEqual(impacts, sorted(impacts))
    self.assertGreater(impacts[0], -60.0)
    # Square law: doubling the carrier quadruples the 6 kHz amplitude.
    out_low = devices.conditioner(self.audio, self._speaker_input(0.35))
    out_high = devices.conditioner(self.audio, self._speaker_input(0.7))
    self.assertAlmostEqual(
        waveform.impact_db(out_high.segment(2e-3), 5e3, 6e3, 500.0) -
        waveform.impact_db(out_low.segment(2e-3), 5e3, 6e3, 500.0),
        20.0 * np.log10(4.0), delta=0.5)

  def _motor_input(self, attack_pp):
    rate, f, duty = 600e6, 20e3, 0.7
    period = 1.0 / f
    pwm = waveform.Pwm(f=f, duty=duty, v_low=0.0, v_high=3.3,
                       rise_time=100e-9)
    if not attack_pp:
      return waveform.synthesize(pwm, rate, 6 * period)
    windows = tuple((i * period + 0.4 * duty * period,
                     i * period + 0.6 * duty * period) for i in range(6))
    attack = waveform.Gated(
        inner=waveform.Sine(f=60e6, amplitude_pp=attack_pp), windows=windows)
    return waveform.synthesize(
        waveform.Sum(components=(pwm, attack)), rate, 6 * period)

  def test_motor_driver_keeps_duty_without_attack(self):
    driver = devices.CONDITIONER_PRESETS["drv8833-like"]
    out = devices.conditioner(driver, self._motor_input(0.0)).segment(50e-6)
    self.assertAlmostEqual(waveform.duty_cycle(out, 2.5), 0.7, delta=1e-3)

  def test_motor_driver_gated_attack_lowers_duty(self):
    driver = devices.CONDITIONER_PRESETS["drv8833-like"]
    out = devices.conditioner(driver, self._motor_input(2.7)).segment(50e-6)
    self.assertAlmostEqual(waveform.duty_cycle(out, 2.5), 0.56, delta=0.02)
    self.assertCountEqual(np.unique(out.samples), [0.0, 5.0])

  def test_empty_input(self):
    with self.assertRaises(errors.EmptyWaveform):
      devices.conditioner(self.audio, waveform.Waveform([], 1e6))

  def test_invalid_driver(self):
    bad = devices.CONDITIONER_PRESETS["drv8833-like"]._replace(v_threshold=6.0)
    with self.assertRaises(errors.InvalidSpec):
      devices.conditioner(bad, self._motor_input(0.0))


class SchmittTriggerTest(absltest.TestCase):

  def test_hysteresis(self):
    v = np.array([0.0, 0.6, 0.4, 1.1, 0.6, 0.4, -0.1, 0.4, 1.0])
    state = devices.schmitt_trigger(v, low=0.0, high=1.0)
    self.assertEqual(list(state),
                     [False, False, False, True, True, True, False, False,
                      True])

  def test_initial_state_holds(self):
    state = devices.schmitt_trigger(np.full(4, 0.5), 0.0, 1.0, initial=True)
    self.assertTrue(np.all(state))


class ComparatorTest(absltest.TestCase):

  def test_zero_input(self):
    self.assertEmpty(devices.comparator(
        waveform.Waveform(np.zeros(100), 1e3), 1e-3))

  def test_constant_above(self):
    w = waveform.Waveform(np.full(100, 2e-3), 1e3)
    events = devices.comparator(w, 1e-3)
    self.assertLen(events, 1)
    self.assertEqual((events[0].start_index, events[0].end_index), (0, 100))
    self.assertAlmostEqual(events[0].end - events[0].start, w.duration)

  def test_debounce_boundary(self):
    samples = np.zeros(100)
    samples[10:14] = 5e-3
    w = waveform.Waveform(samples, 1e3)
    self.assertEmpty(devices.comparator(w, 1e-3, debounce=5))
    self.assertLen(devices.comparator(w, 1e-3, debounce=4), 1)

  def test_magnitude_symmetry(self):
    rng = np.random.default_rng(3)
    w = waveform.Waveform(rng.normal(0.0, 1.0, 1000), 1e3)
    negated = w.scaled(-1.0)
    self.assertEqual(devices.comparator(w, 2.0, debounce=1),
                     devices.comparator(negated, 2.0, debounce=1))

  def test_invalid_threshold(self):
    with self.assertRaises(errors.InvalidThreshold):
      devices.comparator(waveform.Waveform(np.zeros(3), 1e3), 0.0)


if __name__ == "__main__":
  absltest.main()

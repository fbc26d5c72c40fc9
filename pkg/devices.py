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

"""Behavioral device models: detection amplifier, conditioners, comparator.

The detection amplifier follows o = G(delta + n) inside its band. Above the
band, negative feedback stops linearizing it and the out-of-band part of the
input is rectified by a square law into a DC offset. The rectification
effectiveness is

  a2_eff(f) = a2 * (f/f_o)^p / (1 + (f/f_o)^p),

which is the squared magnitude of a Butterworth high-pass of order p/2 at the
onset f_o. The models realize it exactly that way: high-pass, square, scale,
low-pass. A parasitic input pole makes the rectified term decay again at very
high frequencies.

The same structure drives the audio amplifier, which demodulates AM attacks
into its audio band. The motor driver is a Schmitt trigger whose effective
input is pulled by the rectified term.
"""

from __future__ import absolute_import
from __future__ import division
from __future__ import print_function

import collections

import numpy as np
from scipy import optimize
from scipy import signal as sp_signal

from emshield import errors

DiffAmpModel = collections.namedtuple(
    "DiffAmpModel", [
        "gain", "f_max", "a2", "feedback_exponent", "f_parasitic", "rails",
        "noise_sigma"
    ],
    defaults=(2, 5e9, 5.0, 0.0))

AudioAmp = collections.namedtuple(
    "AudioAmp", [
        "gain", "f_band", "a2", "rails", "feedback_exponent", "f_parasitic",
        "noise_sigma"
    ],
    defaults=(4, 100e6, 0.0))

# rect_coeff is in volts per V^2; negative values pull the input low.
MotorDriver = collections.namedtuple(
    "MotorDriver", [
        "v_threshold", "hysteresis", "rect_coeff", "v_low", "v_high", "f_band",
        "f_rect", "feedback_exponent", "f_parasitic"
    ],
    defaults=(20e6, 8, 2e9))

NoiseModel = collections.namedtuple("NoiseModel", ["sigma", "seed"])

EventInterval = collections.namedtuple(
    "EventInterval", ["start", "end", "start_index", "end_index"])

Crossings = collections.namedtuple("Crossings", ["f_pk_eps", "f_dc_eps"])

# Calibration constants. The a2 values place the preset thresholds (2.4 mV,
# 0.17 mV) between the noise and the weakest attack response, and the noise
# sigmas make threshold calibration land on those thresholds.
DIFF_AMP_PRESETS = {
    "ad623-like":
        DiffAmpModel(
            gain=150.0,
            f_max=10e3,
            a2=500.0,
            feedback_exponent=2,
            f_parasitic=5e9,
            rails=4.5,
            noise_sigma=0.36e-3),
    "ad629-like":
        DiffAmpModel(
            gain=1.0,
            f_max=500e3,
            a2=0.01,
            feedback_exponent=2,
            f_parasitic=5e9,
            rails=12.0,
            noise_sigma=22e-6),
}

CONDITIONER_PRESETS = {
    # noise_sigma puts the 6 kHz noise floor 52.7 dB under a 5 kHz tone of
    # 0.2 Vpp at the input, measured with a 500 Hz band over 4 ms. The
    # parasitic pole sits above the wireless band so demodulation falls off
    # smoothly up to 1 GHz.
    "lm386-like":
        AudioAmp(
            gain=20.0,
            f_band=20e3,
            a2=5.0,
            rails=4.5,
            feedback_exponent=4,
            f_parasitic=1.6e9,
            noise_sigma=0.0171),
    "drv8833-like":
        MotorDriver(
            v_threshold=1.65,
            hysteresis=0.165,
            rect_coeff=-8.0,
            v_low=0.0,
            v_high=5.0,
            f_band=5e6,
            f_rect=20e6,
            feedback_exponent=8,
            f_parasitic=2e9),
}

_LOWPASS_STAGES = 4
# Per-stage cutoff scale that puts the cascade's -3 dB point at the nominal f.
_STAGE_SCALE = 1.0 / np.sqrt(2.0**(1.0 / _LOWPASS_STAGES) - 1.0)
# Poles this close to Nyquist are treated as transparent.
_NYQUIST_FRACTION = 0.45


def _check_exponent(p):
  if p < 2 or p % 2:
    raise errors.InvalidSpec(
        "feedback_exponent must be an even integer >= 2, got {}".format(p))


def validate_diff_amp(model):
  if not model.gain > 0:
    raise errors.InvalidSpec("gain must be positive, got {}".format(model.gain))
  if not 0 < model.f_max < model.f_parasitic:
    raise errors.InvalidSpec(
        "need 0 < f_max < f_parasitic, got {} and {}".format(
            model.f_max, model.f_parasitic))
  if not model.rails > 0:
    raise errors.InvalidSpec("rails must be positive, got {}".format(
        model.rails))
  if model.noise_sigma < 0:
    raise errors.InvalidSpec("noise_sigma must be >= 0")
  _check_exponent(model.feedback_exponent)


def validate_conditioner(model):
  if isinstance(model, AudioAmp):
    if not model.rails > 0:
      raise errors.InvalidSpec("rails must be positive, got {}".format(
          model.rails))
    if not 0 < model.f_band < model.f_parasitic:
      raise errors.InvalidSpec("need 0 < f_band < f_parasitic")
    if model.noise_sigma < 0:
      raise errors.InvalidSpec("noise_sigma must be >= 0")
  elif isinstance(model, MotorDriver):
    if not model.v_low < model.v_threshold < model.v_high:
      raise errors.InvalidSpec(
          "need v_low < v_threshold < v_high, got {}, {}, {}".format(
              model.v_low, model.v_threshold, model.v_high))
    if model.hysteresis < 0:
      raise errors.InvalidSpec("hysteresis must be >= 0")
    if not 0 < model.f_band <= model.f_rect:
      raise errors.InvalidSpec("need 0 < f_band <= f_rect")
  else:
    raise errors.InvalidSpec("unknown conditioner {!r}".format(model))
  _check_exponent(model.feedback_exponent)


def noise_samples(noise, num_samples):
  """White Gaussian samples for a NoiseModel; equal seeds give equal draws."""
  if noise.sigma < 0:
    raise errors.InvalidSpec("noise sigma must be >= 0, got {}".format(
        noise.sigma))
  return np.random.default_rng(noise.seed).normal(0.0, noise.sigma,
                                                  num_samples)


def _pole_section(f_cut, sample_rate):
  alpha = -np.expm1(-2.0 * np.pi * f_cut / sample_rate)
  return [alpha, 0.0, 0.0, 1.0, alpha - 1.0, 0.0]


def lowpass(x, f_cut, sample_rate):
  """Causal cascade of single-pole sections, -3 dB at `f_cut`."""
  section = _pole_section(f_cut * _STAGE_SCALE, sample_rate)
  return sp_signal.sosfilt(np.array([section] * _LOWPASS_STAGES), x)


def lowpass_magnitude(f, f_cut):
  x = np.asarray(f, dtype=np.float64) / (f_cut * _STAGE_SCALE)
  return (1.0 + x**2)**(-_LOWPASS_STAGES / 2.0)


def _parasitic(x, f_parasitic, sample_rate):
  if f_parasitic >= _NYQUIST_FRACTION * sample_rate:
    return x
  return sp_signal.sosfilt(np.array([_pole_section(f_parasitic, sample_rate)]),
                           x)


def parasitic_magnitude(f, f_parasitic):
  f = np.asarray(f, dtype=np.float64)
  return 1.0 / np.sqrt(1.0 + (f / f_parasitic)**2)


def rectification_fraction(f, f_onset, p):
  """a2_eff(f) / a2: 0 at DC, 1/2 at the onset, 1 far above it."""
  x = (np.asarray(f, dtype=np.float64) / f_onset)**p
  return x / (1.0 + x)


def _rectified(u, a2, f_onset, p, sample_rate):
  """a2 * (high-passed u)^2 as a new array.

  Zeros when the onset is not representable at the sample rate.
  """
  if a2 == 0 or f_onset >= _NYQUIST_FRACTION * sample_rate:
    return np.zeros_like(u)
  sos = sp_signal.butter(
      p // 2, f_onset, btype="highpass", fs=sample_rate, output="sos")
  out_of_band = sp_signal.sosfilt(sos, u)
  np.square(out_of_band, out=out_of_band)
  out_of_band *= a2
  return out_of_band


def _demodulate(u, gain, a2, f_band, p, sample_rate):
  """lowpass(gain * u + a2 * hp(u)^2), built in one buffer."""
  mix = _rectified(u, a2, f_band, p, sample_rate)
  mix += gain * u
  return lowpass(mix, f_band, sample_rate)


def amplify_difference(model, delta, noise=None):
  """Simulates the detection amplifier on its differential input.

  Args:
    model: DiffAmpModel.
    delta: Waveform of v_plus - v_minus.
    noise: Optional NoiseModel for output-referred white noise.

  Returns:
    The amplifier output, clamped to the rails.

  Raises:
    RateMismatch: The rate is below 4 * f_max.
  """
  validate_diff_amp(model)
  rate = delta.sample_rate
  if rate < 4.0 * model.f_max:
    raise errors.RateMismatch(
        "sample rate {} Hz is below 4 * f_max ({} Hz)".format(
            rate, 4.0 * model.f_max))
  u = _parasitic(delta.samples, model.f_parasitic, rate)
  out = _demodulate(u, model.gain, model.a2, model.f_max,
                    model.feedback_exponent, rate)
  del u
  if noise is not None and noise.sigma > 0:
    out += noise_samples(noise, len(out))
  np.clip(out, -model.rails, model.rails, out=out)
  return delta.with_samples(out)


def diffamp(model, v_plus, v_minus, noise=None):
  """Simulates the detection differential amplifier.

  Args:
    model: DiffAmpModel.
    v_plus: Waveform tapped from the primary wire.
    v_minus: Waveform tapped from the reference wire.
    noise: Optional NoiseModel for output-referred white noise.

  Returns:
    The amplifier output, clamped to the rails.

  Raises:
    RateMismatch: Rates differ or are below 4 * f_max.
    LengthMismatch: The inputs differ in length.
  """
  v_plus.check_aligned(v_minus)
  return amplify_difference(model, v_plus - v_minus, noise)


def rectified_dc_estimate(model, f, amplitude):
  """Closed-form DC offset produced by a tone of `amplitude` volts at `f`."""
  if np.any(np.asarray(f) < 0) or amplitude < 0:
    raise errors.NegativeInput("f and amplitude must be >= 0")
  gain = amplitude * parasitic_magnitude(f, model.f_parasitic)
  return (model.a2 *
          rectification_fraction(f, model.f_max, model.feedback_exponent) *
          gain**2 / 2.0)


def linear_peak_estimate(model, f, amplitude):
  """Closed-form linear-path output peak for a tone at `f`."""
  return (model.gain * amplitude * lowpass_magnitude(f, model.f_max) *
          parasitic_magnitude(f, model.f_parasitic))


def find_crossings(model, amplitude, epsilon):
  """Finds where the two detection paths cross the threshold.

  Args:
    model: DiffAmpModel.
    amplitude: Differential input amplitude in volts.
    epsilon: Comparator threshold in volts.

  Returns:
    Crossings(f_pk_eps, f_dc_eps): the lowest frequency at which the linear
    peak falls below epsilon and the lowest frequency at which the rectified
    DC reaches it. Both are accurate to 0.1%.

  Raises:
    NoCrossing: One of the curves never crosses epsilon.
  """
  if not epsilon > 0:
    raise errors.InvalidThreshold(
        "epsilon must be positive, got {}".format(epsilon))
  log_eps = np.log(epsilon)
  log_lo = np.log10(model.f_max) - 6.0
  xtol = np.log10(1.001) / 10.0

  def peak_margin(log_f):
    return np.log(linear_peak_estimate(model, 10.0**log_f, amplitude)) - log_eps

  if model.gain * amplitude <= epsilon or peak_margin(log_lo) <= 0:
    raise errors.NoCrossing(
        "peak", "in-band peak {} V never exceeds epsilon {} V".format(
            model.gain * amplitude, epsilon))
  log_hi = np.log10(model.f_max)
  while peak_margin(log_hi) >= 0:
    log_hi += 1.0
    if log_hi > np.log10(model.f_max) + 20.0:
      raise errors.NoCrossing("peak", "linear peak never falls below epsilon")
  f_pk = 10.0**optimize.brentq(peak_margin, log_lo, log_hi, xtol=xtol)

  log_grid = np.linspace(log_lo,
                         np.log10(max(model.f_parasitic, model.f_max)) + 3.0,
                         4001)
  dc = rectified_dc_estimate(model, 10.0**log_grid, amplitude)
  above = np.flatnonzero(dc >= epsilon)
  if not above.size:
    raise errors.NoCrossing(
        "dc", "rectified DC peaks at {} V, below epsilon {} V".format(
            float(np.max(dc)), epsilon))
  first = above[0]
  if first == 0:
    f_dc = 10.0**log_grid[0]
  else:
    f_dc = 10.0**optimize.brentq(
        lambda log_f: rectified_dc_estimate(model, 10.0**log_f, amplitude) -
        epsilon,
        log_grid[first - 1],
        log_grid[first],
        xtol=xtol)
  return Crossings(f_pk_eps=float(f_pk), f_dc_eps=float(f_dc))


def schmitt_trigger(v, low, high, initial=False):
  """Hysteretic threshold: high once v >= high, low once v < low."""
  v = np.asarray(v)
  set_high = v >= high
  set_low = v < low
  index = np.arange(len(v))
  last = np.maximum.accumulate(np.where(set_high | set_low, index, -1))
  return np.where(last >= 0, set_high[np.maximum(last, 0)], initial)


def conditioner(model, input_wave, noise=None):
  """Turns a control signal into a drive signal.

  Args:
    model: AudioAmp or MotorDriver.
    input_wave: Control-wire waveform, legitimate signal plus injection.
    noise: Optional NoiseModel; only the AudioAmp uses it, band-limited to
      f_band so the in-band noise floor does not depend on the sample rate.

  Returns:
    The drive waveform.
  """
  if not len(input_wave):
    raise errors.EmptyWaveform("conditioner input has no samples")
  validate_conditioner(model)
  rate = input_wave.sample_rate
  x = input_wave.samples
  p = model.feedback_exponent
  if isinstance(model, AudioAmp):
    u = _parasitic(x, model.f_parasitic, rate)
    out = _demodulate(u, model.gain, model.a2, model.f_band, p, rate)
    del u
    if noise is not None and noise.sigma > 0:
      white = noise_samples(
          NoiseModel(noise.sigma * np.sqrt(rate / (2.0 * model.f_band)),
                     noise.seed), len(x))
      out += lowpass(white, model.f_band, rate)
    np.clip(out, -model.rails, model.rails, out=out)
    return input_wave.with_samples(out)
  u = _parasitic(x, model.f_parasitic, rate)
  v_eff = lowpass(x, model.f_band, rate)
  v_eff += model.rect_coeff * lowpass(
      _rectified(u, 1.0, model.f_rect, p, rate), model.f_band, rate)
  half = model.hysteresis / 2.0
  state = schmitt_trigger(v_eff, model.v_threshold - half,
                          model.v_threshold + half)
  return input_wave.with_samples(np.where(state, model.v_high, model.v_low))


def comparator(o, epsilon, debounce=1):
  """Window comparator on |o| with a minimum run length.

  Returns:
    EventInterval list of maximal runs with |o| >= epsilon lasting at least
    `debounce` samples. `end` is exclusive.
  """
  if not len(o):
    raise errors.EmptyWaveform("comparator input has no samples")
  if not epsilon > 0:
    raise errors.InvalidThreshold(
        "epsilon must be positive, got {}".format(epsilon))
  if debounce < 1:
    raise errors.InvalidSpec("debounce must be >= 1, got {}".format(debounce))
  above = np.concatenate([[False], np.abs(o.samples) >= epsilon, [False]])
  edges = np.flatnonzero(np.diff(above.astype(np.int8)))
  events = []
  for start, end in zip(edges[0::2], edges[1::2]):
    if end - start >= debounce:
      events.append(
          EventInterval(
              start=o.t0 + start / o.sample_rate,
              end=o.t0 + end / o.sample_rate,
              start_index=int(start),
              end_index=int(end)))
  return events

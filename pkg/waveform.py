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

"""Sampled voltage waveforms: synthesis, spectra and time-domain analytics.

A Waveform is a uniformly sampled voltage trace. Signal specs are small
namedtuples describing what to synthesize; `synthesize` renders them at a
given sample rate. Spectral analytics use a one-sided periodogram normalized
so that a tone of amplitude A carries A^2/2 in total across its bins.
"""

from __future__ import absolute_import
from __future__ import division
from __future__ import print_function

import collections
import struct

import numpy as np
from scipy import fft as sp_fft
from scipy import signal as sp_signal

from emshield import errors

Sine = collections.namedtuple(
    "Sine", ["f", "amplitude_pp", "phase"], defaults=(0.0,))
# rise_time is the 0-100% edge duration; zero renders an ideal square wave.
Pwm = collections.namedtuple(
    "Pwm", ["f", "duty", "v_low", "v_high", "rise_time"], defaults=(0.0,))
Am = collections.namedtuple(
    "Am", ["carrier_f", "carrier_amplitude_pp", "mod_f", "mod_index"])
Silence = collections.namedtuple("Silence", [])
Sum = collections.namedtuple("Sum", ["components"])
# windows: tuple of (t_start, t_end) pairs in seconds, half-open.
Gated = collections.namedtuple("Gated", ["inner", "windows"])

SIGNAL_TYPES = (Sine, Pwm, Am, Silence, Sum, Gated)

# Binary format: magic, u32 sample count, f64 sample rate, little-endian.
BINARY_MAGIC = b"EMW1"
_BINARY_HEADER = struct.Struct("<4sId")

# Pwm phases are rounded to this many decimals so that samples landing on an
# edge are classified consistently despite float error.
_PHASE_DECIMALS = 9


class Waveform(object):
  """Immutable, uniformly sampled voltage trace."""

  def __init__(self, samples, sample_rate, t0=0.0):
    if not sample_rate > 0:
      raise errors.RateMismatch(
          "sample_rate must be positive, got {}".format(sample_rate))
    array = np.asarray(samples, dtype=np.float64)
    if array.ndim != 1:
      raise errors.InvalidSpec(
          "samples must be one-dimensional, got shape {}".format(array.shape))
    if array is samples:
      array = array.copy()
    array.flags.writeable = False
    self._samples = array
    self._sample_rate = float(sample_rate)
    self._t0 = float(t0)

  @classmethod
  def _wrap(cls, array, sample_rate, t0=0.0):
    """Wraps a freshly computed array without copying it."""
    wave = cls.__new__(cls)
    array = np.asarray(array, dtype=np.float64)
    array.flags.writeable = False
    wave._samples = array
    wave._sample_rate = float(sample_rate)
    wave._t0 = float(t0)
    return wave

  @property
  def samples(self):
    return self._samples

  @property
  def sample_rate(self):
    return self._sample_rate

  @property
  def t0(self):
    return self._t0

  @property
  def duration(self):
    return len(self._samples) / self._sample_rate

  def __len__(self):
    return len(self._samples)

  def __repr__(self):
    return "Waveform(n={}, sample_rate={}, t0={})".format(
        len(self), self._sample_rate, self._t0)

  def times(self):
    return self._t0 + np.arange(len(self._samples)) / self._sample_rate

  def with_samples(self, samples):
    """Returns a waveform on the same time grid with new samples.

    The array is adopted without a copy and made read-only.
    """
    array = np.asarray(samples, dtype=np.float64)
    if array.shape != self._samples.shape:
      raise errors.LengthMismatch("expected {} samples, got {}".format(
          len(self._samples), array.size))
    return Waveform._wrap(array, self._sample_rate, self._t0)

  def segment(self, t_start):
    """Returns the part of the waveform at or after `t_start` seconds."""
    index = int(np.ceil((t_start - self._t0) * self._sample_rate - 1e-9))
    index = min(max(index, 0), len(self._samples))
    return Waveform._wrap(self._samples[index:], self._sample_rate,
                          self._t0 + index / self._sample_rate)

  def check_aligned(self, other):
    if self._sample_rate != other.sample_rate:
      raise errors.RateMismatch("sample rates differ: {} vs {}".format(
          self._sample_rate, other.sample_rate))
    if len(self) != len(other):
      raise errors.LengthMismatch("lengths differ: {} vs {}".format(
          len(self), len(other)))

  def __add__(self, other):
    self.check_aligned(other)
    return Waveform._wrap(self._samples + other.samples, self._sample_rate,
                          self._t0)

  def __sub__(self, other):
    self.check_aligned(other)
    return Waveform._wrap(self._samples - other.samples, self._sample_rate,
                          self._t0)

  def scaled(self, gain):
    return Waveform._wrap(self._samples * gain, self._sample_rate, self._t0)


def max_frequency(spec):
  """Returns the highest frequency component a spec contains, in Hz."""
  if isinstance(spec, Sine):
    return float(spec.f)
  if isinstance(spec, Pwm):
    return float(spec.f)
  if isinstance(spec, Am):
    return float(spec.carrier_f + spec.mod_f)
  if isinstance(spec, Silence):
    return 0.0
  if isinstance(spec, Sum):
    return max([max_frequency(c) for c in spec.components] or [0.0])
  if isinstance(spec, Gated):
    return max_frequency(spec.inner)
  raise errors.InvalidSpec("unknown signal spec {!r}".format(spec))


def min_frequency(spec):
  """Returns the lowest nonzero frequency in a spec, or None."""
  if isinstance(spec, Sine):
    return float(spec.f) if spec.f > 0 else None
  if isinstance(spec, Pwm):
    return float(spec.f)
  if isinstance(spec, Am):
    return float(spec.mod_f) if spec.mod_f > 0 else float(spec.carrier_f)
  if isinstance(spec, Silence):
    return None
  if isinstance(spec, Sum):
    found = [min_frequency(c) for c in spec.components]
    found = [f for f in found if f is not None]
    return min(found) if found else None
  if isinstance(spec, Gated):
    return min_frequency(spec.inner)
  raise errors.InvalidSpec("unknown signal spec {!r}".format(spec))


def check_ranges(spec, t_begin, t_end):
  """Raises InvalidSpec for parameters outside their documented ranges."""
  if isinstance(spec, Sine):
    if spec.f < 0 or spec.amplitude_pp < 0:
      raise errors.InvalidSpec(
          "sine needs f >= 0 and amplitude_pp >= 0, got {}".format(spec))
  elif isinstance(spec, Pwm):
    if not 0.0 < spec.duty < 1.0:
      raise errors.InvalidSpec(
          "pwm duty must be in (0, 1), got {}".format(spec.duty))
    if not spec.f > 0:
      raise errors.InvalidSpec("pwm f must be positive, got {}".format(spec.f))
    edge = spec.rise_time * spec.f
    if spec.rise_time < 0 or edge >= min(spec.duty, 1.0 - spec.duty):
      raise errors.InvalidSpec(
          "pwm rise_time {} does not fit inside a high or low interval".format(
              spec.rise_time))
  elif isinstance(spec, Am):
    if not 0.0 <= spec.mod_index <= 1.0:
      raise errors.InvalidSpec(
          "am mod_index must be in [0, 1], got {}".format(spec.mod_index))
    if spec.carrier_f <= 0 or spec.mod_f < 0 or spec.carrier_amplitude_pp < 0:
      raise errors.InvalidSpec("invalid am parameters {}".format(spec))
  elif isinstance(spec, Sum):
    for component in spec.components:
      check_ranges(component, t_begin, t_end)
  elif isinstance(spec, Gated):
    previous_end = None
    tolerance = 1e-12 * max(1.0, abs(t_end))
    for start, end in spec.windows:
      if not start < end:
        raise errors.InvalidSpec(
            "gate window ({}, {}) is empty or reversed".format(start, end))
      if start < t_begin - tolerance or end > t_end + tolerance:
        raise errors.InvalidSpec(
            "gate window ({}, {}) is outside [{}, {}]".format(
                start, end, t_begin, t_end))
      if previous_end is not None and start < previous_end:
        raise errors.InvalidSpec(
            "gate windows overlap or are unsorted at t={}".format(start))
      previous_end = end
    check_ranges(spec.inner, t_begin, t_end)
  elif not isinstance(spec, Silence):
    raise errors.InvalidSpec("unknown signal spec {!r}".format(spec))


def _pwm_integral(cycles, duty):
  """Integral of the unit square wave over [0, cycles], in periods."""
  whole = np.floor(cycles)
  return whole * duty + np.minimum(cycles - whole, duty)


def _render(spec, t):
  if isinstance(spec, Sine):
    return 0.5 * spec.amplitude_pp * np.sin(2.0 * np.pi * spec.f * t +
                                            spec.phase)
  if isinstance(spec, Pwm):
    cycles = t * spec.f
    if spec.rise_time > 0:
      half = 0.5 * spec.rise_time * spec.f
      level = (_pwm_integral(cycles + half, spec.duty) -
               _pwm_integral(cycles - half, spec.duty)) / (2.0 * half)
    else:
      phase = np.mod(np.round(cycles, _PHASE_DECIMALS), 1.0)
      level = (phase < spec.duty).astype(np.float64)
    return spec.v_low + (spec.v_high - spec.v_low) * level
  if isinstance(spec, Am):
    envelope = 1.0 + spec.mod_index * np.cos(2.0 * np.pi * spec.mod_f * t)
    return (0.5 * spec.carrier_amplitude_pp * envelope *
            np.cos(2.0 * np.pi * spec.carrier_f * t))
  if isinstance(spec, Silence):
    return np.zeros_like(t)
  if isinstance(spec, Sum):
    total = np.zeros_like(t)
    for component in spec.components:
      total += _render(component, t)
    return total
  if isinstance(spec, Gated):
    mask = np.zeros(t.shape, dtype=bool)
    for start, end in spec.windows:
      mask |= (t >= start) & (t < end)
    return np.where(mask, _render(spec.inner, t), 0.0)
  raise errors.InvalidSpec("unknown signal spec {!r}".format(spec))


def synthesize(spec, sample_rate, duration, t0=0.0):
  """Renders a signal spec into a waveform.

  Args:
    spec: One of the signal spec namedtuples.
    sample_rate: Sample rate in Hz.
    duration: Length in seconds; the sample count is round(duration * rate).
    t0: Time of the first sample in seconds.

  Returns:
    A Waveform. Identical arguments always give bit-identical samples.

  Raises:
    AliasingError: A component frequency is at or above sample_rate / 2.
    InvalidSpec: A parameter is out of range or duration is not positive.
  """
  if not sample_rate > 0:
    raise errors.RateMismatch(
        "sample_rate must be positive, got {}".format(sample_rate))
  if not duration > 0:
    raise errors.InvalidSpec(
        "duration must be positive, got {}".format(duration))
  num_samples = int(round(duration * sample_rate))
  if num_samples < 1:
    raise errors.InvalidSpec(
        "duration {} s is shorter than one sample at {} Hz".format(
            duration, sample_rate))
  highest = max_frequency(spec)
  if highest >= sample_rate / 2.0:
    raise errors.AliasingError(
        "frequency {} Hz is not below Nyquist ({} Hz)".format(
            highest, sample_rate / 2.0))
  check_ranges(spec, t0, t0 + num_samples / sample_rate)
  t = t0 + np.arange(num_samples) / sample_rate
  return Waveform._wrap(_render(spec, t), sample_rate, t0)


def with_carrier(spec, f, amplitude_pp):
  """Retunes the carrier of a Sine or Am spec, looking through Gated."""
  if isinstance(spec, Sine):
    return spec._replace(f=f, amplitude_pp=amplitude_pp)
  if isinstance(spec, Am):
    return spec._replace(carrier_f=f, carrier_amplitude_pp=amplitude_pp)
  if isinstance(spec, Gated):
    return spec._replace(inner=with_carrier(spec.inner, f, amplitude_pp))
  raise errors.InvalidSpec(
      "cannot retune the carrier of {}".format(type(spec).__name__))


class Spectrum(collections.namedtuple("Spectrum", ["bin_hz", "power"])):
  """One-sided power spectrum; `power` is in V^2 per bin."""
  __slots__ = ()

  @property
  def frequencies(self):
    return np.arange(len(self.power)) * self.bin_hz


def spectrum(w, window="hann"):
  """Computes the one-sided periodogram of a waveform.

  The periodogram is normalized by N * sum(window^2). With the "boxcar"
  window the bin powers sum to the mean square of the samples; with "hann"
  they sum to the window-weighted mean square, and a bin-centred tone spreads
  A^2/2 over three bins.

  Args:
    w: Waveform.
    window: Any window name accepted by scipy.signal.get_window.

  Returns:
    A Spectrum.
  """
  n = len(w)
  if n == 0:
    raise errors.EmptyWaveform("cannot take the spectrum of an empty waveform")
  taper = sp_signal.get_window(window, n)
  transform = sp_fft.rfft(w.samples * taper)
  power = np.abs(transform)**2 / (n * np.sum(taper**2))
  power[1:] *= 2.0
  if n % 2 == 0:
    power[-1] /= 2.0
  return Spectrum(bin_hz=w.sample_rate / n, power=power)


def _check_band(w, center_f, bandwidth):
  if center_f + bandwidth / 2.0 >= w.sample_rate / 2.0:
    raise errors.AliasingError(
        "band {} +/- {} Hz reaches Nyquist ({} Hz)".format(
            center_f, bandwidth / 2.0, w.sample_rate / 2.0))


def _band_sum(spec, center_f, bandwidth):
  inside = (np.abs(spec.frequencies - center_f) <=
            bandwidth / 2.0 + 1e-9 * spec.bin_hz)
  return float(np.sum(spec.power[inside]))


def band_power(w, center_f, bandwidth):
  """Sums the Hann periodogram over [center_f - bw/2, center_f + bw/2]."""
  _check_band(w, center_f, bandwidth)
  return _band_sum(spectrum(w), center_f, bandwidth)


def impact_db(w, f_legit, f_malicious, bandwidth):
  """Ratio of malicious to legitimate band power, in dB.

  Args:
    w: Conditioner output waveform.
    f_legit: Centre of the legitimate band in Hz.
    f_malicious: Centre of the malicious band in Hz.
    bandwidth: Width of both bands in Hz.

  Returns:
    10 * log10(P_malicious / P_legit), or -inf if P_malicious is exactly 0.

  Raises:
    DegenerateError: The legitimate band carries no power.
  """
  _check_band(w, f_malicious, bandwidth)
  _check_band(w, f_legit, bandwidth)
  spec = spectrum(w)
  p_malicious = _band_sum(spec, f_malicious, bandwidth)
  p_legit = _band_sum(spec, f_legit, bandwidth)
  if p_legit == 0.0:
    raise errors.DegenerateError(
        "no power in the legitimate band at {} Hz".format(f_legit))
  if p_malicious == 0.0:
    return float("-inf")
  return float(10.0 * np.log10(p_malicious / p_legit))


def _require_samples(w):
  if len(w) == 0:
    raise errors.EmptyWaveform("waveform has no samples")


def peak_amplitude(w):
  """Largest deviation of any sample from the waveform mean."""
  _require_samples(w)
  return float(np.max(np.abs(w.samples - np.mean(w.samples))))


def mean_offset(w):
  _require_samples(w)
  return float(np.mean(w.samples))


def duty_cycle(w, v_mid):
  """Fraction of samples strictly above `v_mid`."""
  _require_samples(w)
  return np.count_nonzero(w.samples > v_mid) / len(w)


def write_csv(w, path):
  """Writes time_s,volts rows with 17 significant digits."""
  table = np.column_stack([w.times(), w.samples])
  with open(path, "w") as f:
    np.savetxt(f, table, fmt="%.17g", delimiter=",", header="time_s,volts",
               comments="")


def read_csv(path, sample_rate=None):
  """Reads a waveform written by `write_csv`.

  The sample rate is recovered from the time column unless given; a single
  sample file needs it given explicitly.
  """
  with open(path) as f:
    table = np.loadtxt(f, delimiter=",", skiprows=1, ndmin=2)
  times, volts = table[:, 0], table[:, 1]
  if sample_rate is None:
    if len(times) < 2:
      raise errors.RateMismatch(
          "{} has fewer than two samples; pass sample_rate".format(path))
    sample_rate = (len(times) - 1) / (times[-1] - times[0])
  t0 = times[0] if len(times) else 0.0
  return Waveform._wrap(volts.copy(), sample_rate, t0)


def write_binary(w, path):
  with open(path, "wb") as f:
    f.write(_BINARY_HEADER.pack(BINARY_MAGIC, len(w), w.sample_rate))
    f.write(w.samples.astype("<f8").tobytes())


def read_binary(path):
  with open(path, "rb") as f:
    header = f.read(_BINARY_HEADER.size)
    if len(header) != _BINARY_HEADER.size:
      raise errors.Error("{} is too short for an EMW1 header".format(path))
    magic, count, rate = _BINARY_HEADER.unpack(header)
    if magic != BINARY_MAGIC:
      raise errors.Error("{} is not an EMW1 file".format(path))
    payload = f.read(8 * count)
  if len(payload) != 8 * count:
    raise errors.Error("{} is truncated: expected {} samples".format(
        path, count))
  return Waveform._wrap(np.frombuffer(payload, dtype="<f8").astype(np.float64),
                        rate)

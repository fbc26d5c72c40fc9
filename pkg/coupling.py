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

"""Wires as frequency-selective antennas, and injection by superposition.

A TransferFunction maps a radiated attack signal to the voltage it induces on
one wire. Its magnitude is a broadband gain plus Lorentzian resonance modes;
phase is a pure delay. A CouplingPair models the primary wire together with a
reference wire that is K times less sensitive.
"""

from __future__ import absolute_import
from __future__ import division
from __future__ import print_function

import collections

import numpy as np
from scipy import fft as sp_fft

from emshield import errors

SPEED_OF_LIGHT = 299792458.0  # m/s

Mode = collections.namedtuple("Mode", ["f_res", "q", "peak_gain"])
TransferFunction = collections.namedtuple(
    "TransferFunction", ["broadband_gain", "modes", "delay"],
    defaults=(1.0, (), 0.0))
CouplingPair = collections.namedtuple(
    "CouplingPair", ["t_c", "k", "skew"], defaults=(0.0,))

IDENTITY = TransferFunction()

# Lorentzian tails are padded for this many decay times before truncation.
_TAIL_DECAY_TIMES = 10.0


def validate_transfer_function(tf):
  if tf.broadband_gain < 0:
    raise errors.InvalidSpec(
        "broadband_gain must be >= 0, got {}".format(tf.broadband_gain))
  if tf.delay < 0:
    raise errors.InvalidSpec("delay must be >= 0, got {}".format(tf.delay))
  for mode in tf.modes:
    if not (mode.f_res > 0 and mode.q > 0 and mode.peak_gain >= 0):
      raise errors.InvalidSpec("invalid resonance mode {}".format(mode))


def validate_pair(pair):
  validate_transfer_function(pair.t_c)
  if not pair.k > 1:
    raise errors.DegenerateK("k must be > 1, got {}".format(pair.k))


def lorentzian(f, f_res, q):
  """Unit-peak resonance shape 1 / (1 + q^2 (f/f_res - f_res/f)^2)."""
  f = np.asarray(f, dtype=np.float64)
  with np.errstate(divide="ignore", invalid="ignore"):
    detune = f / f_res - f_res / f
    shape = 1.0 / (1.0 + (q * detune)**2)
  return np.where(f > 0, shape, 0.0)


def magnitude(tf, f):
  """|H(f)| of a transfer function at frequencies `f` (Hz)."""
  response = np.full(np.shape(f), float(tf.broadband_gain))
  for mode in tf.modes:
    response = response + mode.peak_gain * lorentzian(f, mode.f_res, mode.q)
  return response


def apply(tf, w):
  """Passes a waveform through a transfer function.

  The magnitude response and delay are applied in the frequency domain on a
  zero-padded transform, and the result is truncated to the input length.
  The first `delay` seconds of output are a start-up transient.

  Args:
    tf: TransferFunction.
    w: Waveform.

  Returns:
    A Waveform of the same length and rate.
  """
  n = len(w)
  if n == 0:
    raise errors.EmptyWaveform("cannot couple an empty waveform")
  if not tf.modes and tf.delay == 0:
    return w.scaled(tf.broadband_gain)
  tail = abs(tf.delay)
  for mode in tf.modes:
    tail = max(tail, _TAIL_DECAY_TIMES * mode.q / (np.pi * mode.f_res))
  pad = min(n, int(np.ceil(tail * w.sample_rate)) + 1)
  n_fft = sp_fft.next_fast_len(n + pad, real=True)
  freqs = sp_fft.rfftfreq(n_fft, d=1.0 / w.sample_rate)
  spectrum = sp_fft.rfft(w.samples, n_fft)
  spectrum *= magnitude(tf, freqs)
  if tf.delay:
    spectrum *= np.exp(-2j * np.pi * freqs * tf.delay)
  del freqs
  out = sp_fft.irfft(spectrum, n_fft)
  del spectrum
  return w.with_samples(out[:n])


def couple_pair(attack, pair):
  """Injects an attack into the primary and reference wires.

  Returns:
    (primary_injected, reference_injected). The reference is the primary
    scaled by 1/k and, for a nonzero skew, delayed by `skew` seconds.
  """
  primary = apply(pair.t_c, attack)
  if pair.skew:
    reference = apply(
        TransferFunction(broadband_gain=1.0 / pair.k, delay=pair.skew),
        primary)
  else:
    reference = primary.with_samples(primary.samples / pair.k)
  return primary, reference


def wire_resonant_frequency(length):
  """Half-wave resonance c / (2 * length) of a wire, in Hz."""
  if not length > 0:
    raise errors.InvalidLength(
        "wire length must be positive, got {}".format(length))
  return SPEED_OF_LIGHT / (2.0 * length)


def injected_amplitude_from_power(attack_power, coupling_coefficient):
  """Induced amplitude (V) = coupling_coefficient * sqrt(attack_power)."""
  if attack_power < 0 or coupling_coefficient < 0:
    raise errors.NegativeInput(
        "attack_power and coupling_coefficient must be >= 0, got {}, {}".format(
            attack_power, coupling_coefficient))
  return coupling_coefficient * np.sqrt(attack_power)

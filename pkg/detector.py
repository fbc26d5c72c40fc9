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

"""Detection decision, threshold calibration and parameter design.

The detector taps the primary and reference wires into a differential
amplifier and compares |o| against epsilon. A designer picks (k, g, epsilon)
so that

  g * (p_min * (k - 1) / k + n) >= epsilon > g * n,

i.e. the amplifier never fires on noise n alone but always fires once the
injected amplitude reaches p_min.
"""

from __future__ import absolute_import
from __future__ import division
from __future__ import print_function

import collections

from absl import logging
import numpy as np

from emshield import coupling
from emshield import devices
from emshield import errors

DetectorConfig = collections.namedtuple(
    "DetectorConfig", ["epsilon", "debounce", "adaptive"],
    defaults=(1, None))

# window is in seconds; floor is in volts.
AdaptivePolicy = collections.namedtuple(
    "AdaptivePolicy", ["window", "quantile", "margin", "floor"],
    defaults=(0.0,))

DesignedParams = collections.namedtuple("DesignedParams", ["k", "g", "epsilon"])

DetectionOutcome = collections.namedtuple(
    "DetectionOutcome", ["detected", "latency", "peak", "dc_offset", "events"])

CancellationReport = collections.namedtuple(
    "CancellationReport", ["f_required", "power_ratio_required", "phase_only"])


def validate_policy(policy):
  if not policy.window > 0:
    raise errors.InvalidSpec("adaptive window must be positive, got {}".format(
        policy.window))
  if not 0.5 < policy.quantile <= 1.0:
    raise errors.InvalidSpec("adaptive quantile must be in (0.5, 1], got {}"
                             .format(policy.quantile))
  if policy.margin < 1:
    raise errors.InvalidSpec("adaptive margin must be >= 1, got {}".format(
        policy.margin))
  if policy.floor < 0:
    raise errors.InvalidSpec("adaptive floor must be >= 0, got {}".format(
        policy.floor))


def validate_config(cfg):
  if not cfg.epsilon > 0:
    raise errors.InvalidThreshold("epsilon must be positive, got {}".format(
        cfg.epsilon))
  if cfg.debounce < 1:
    raise errors.InvalidSpec("debounce must be >= 1, got {}".format(
        cfg.debounce))
  if cfg.adaptive is not None:
    validate_policy(cfg.adaptive)


def calibrate_threshold(noise_runs, margin=1.0):
  """Sets epsilon from detector outputs recorded without an attack.

  Args:
    noise_runs: List of no-attack detector output Waveforms.
    margin: Multiplier >= 1 applied to the largest observed |o|.

  Returns:
    margin * max over runs of max |o|, in volts. All-zero runs give 0, which
    `detect` rejects.

  Raises:
    EmptyCalibration: No runs, or every run is empty.
  """
  if margin < 1:
    raise errors.InvalidSpec("margin must be >= 1, got {}".format(margin))
  peaks = [np.max(np.abs(run.samples)) for run in noise_runs if len(run)]
  if not peaks:
    raise errors.EmptyCalibration("no samples to calibrate on")
  epsilon = margin * float(max(peaks))
  logging.info("Calibrated epsilon=%.6g V from %d runs (margin %.3g)",
               epsilon, len(peaks), margin)
  return epsilon


def detect(o, cfg, attack_onset=None, analysis_start=0.0):
  """Runs the comparator over a detector output.

  Args:
    o: Differential amplifier output.
    cfg: DetectorConfig.
    attack_onset: Attack start time in seconds, or None without an attack.
    analysis_start: Peak and DC are measured from max(onset, analysis_start).

  Returns:
    DetectionOutcome. `latency` is the delay from the onset to the first event
    that is still active after it, clipped at 0.
  """
  validate_config(cfg)
  events = devices.comparator(o, cfg.epsilon, cfg.debounce)
  start = analysis_start
  if attack_onset is not None:
    start = max(start, attack_onset)
  window = o.segment(start)
  if not len(window):
    raise errors.EmptyWaveform(
        "analysis starts at {} s, after the waveform ends".format(start))
  peak = float(np.max(np.abs(window.samples - np.mean(window.samples))))
  latency = None
  if attack_onset is not None:
    for event in events:
      if event.end > attack_onset:
        latency = max(0.0, event.start - attack_onset)
        break
  return DetectionOutcome(
      detected=bool(events),
      latency=latency,
      peak=peak,
      dc_offset=float(np.mean(window.samples)),
      events=events)


def min_detectable_power(k, g, epsilon, n):
  """Smallest injected amplitude (V) that the detector is guaranteed to see.

  Raises:
    DegenerateK: k <= 1.
    InvalidRegime: epsilon <= g * n, so noise alone would fire.
  """
  if not k > 1:
    raise errors.DegenerateK("k must be > 1, got {}".format(k))
  if not g > 0:
    raise errors.InvalidSpec("g must be positive, got {}".format(g))
  if n < 0:
    raise errors.NegativeInput("noise peak must be >= 0, got {}".format(n))
  if not epsilon > g * n:
    raise errors.InvalidRegime(
        "epsilon {} V does not exceed g * n = {} V".format(epsilon, g * n))
  asymptote = epsilon / g - n
  if np.isinf(k):
    return asymptote
  return asymptote * k / (k - 1.0)


def min_power_curve(k_values, g, epsilon, n):
  """List of (k, min_detectable_power) pairs for each k."""
  return [(k, min_detectable_power(k, g, epsilon, n)) for k in k_values]


def feasibility_check(params, p_min, noise_peak):
  """True when g * (p_min (k-1)/k + n) >= epsilon > g * n both hold."""
  k, g, epsilon = params
  if not (k > 1 and g > 0):
    return False
  differential = p_min * (k - 1.0) / k
  return g * (differential + noise_peak) >= epsilon > g * noise_peak


def design_params(p_min, noise_peak, g_options, k_max):
  """Chooses (k, g, epsilon) that detect p_min without firing on noise.

  The largest gain and k = k_max are tried first; epsilon sits at the middle
  of the feasible interval.

  Args:
    p_min: Smallest injected amplitude (V) that must be detected.
    noise_peak: Worst-case noise peak (V) at the amplifier input.
    g_options: Available amplifier gains.
    k_max: Largest achievable sensitivity ratio.

  Returns:
    DesignedParams.

  Raises:
    Infeasible: p_min <= 0 or no gain admits a non-empty interval.
  """
  if not p_min > 0:
    raise errors.Infeasible("P_min must be positive, got {}".format(p_min))
  if noise_peak < 0:
    raise errors.NegativeInput(
        "noise_peak must be >= 0, got {}".format(noise_peak))
  if not g_options:
    raise errors.InvalidSpec("g_options must not be empty")
  if not k_max > 1:
    raise errors.DegenerateK("k_max must be > 1, got {}".format(k_max))
  for g in sorted(g_options, reverse=True):
    if not g > 0:
      continue
    low = g * noise_peak
    high = g * (p_min * (k_max - 1.0) / k_max + noise_peak)
    epsilon = 0.5 * (low + high)
    params = DesignedParams(k=float(k_max), g=float(g), epsilon=epsilon)
    if feasibility_check(params, p_min, noise_peak):
      return params
    logging.info("Gain %g leaves no room for epsilon in (%g, %g]", g, low,
                 high)
  raise errors.Infeasible(
      "no gain in {} separates p_min={} V from noise {} V".format(
          list(g_options), p_min, noise_peak))


def adaptive_update(cfg, recent_noise):
  """Re-derives epsilon from the most recent no-attack detector output.

  The new epsilon is margin times the policy quantile of |o| over the last
  `window` seconds, raised above the largest |o| in that window and to at
  least the policy floor. Replaying the same window never fires.

  Returns:
    A new DetectorConfig.

  Raises:
    NoPolicy: cfg has no adaptive policy.
  """
  policy = cfg.adaptive
  if policy is None:
    raise errors.NoPolicy("detector config has no adaptive policy")
  validate_policy(policy)
  if not len(recent_noise):
    raise errors.EmptyWaveform("adaptive update needs noise samples")
  count = int(np.ceil(policy.window * recent_noise.sample_rate))
  magnitude = np.abs(recent_noise.samples[-count:])
  epsilon = policy.margin * float(np.quantile(magnitude, policy.quantile))
  epsilon = max(epsilon, float(np.nextafter(np.max(magnitude), np.inf)))
  if epsilon < policy.floor:
    logging.warning("Adaptive epsilon %.6g V is below the floor, using %.6g V",
                    epsilon, policy.floor)
    epsilon = policy.floor
  if epsilon != cfg.epsilon:
    logging.info("Adaptive epsilon %.6g V -> %.6g V", cfg.epsilon, epsilon)
  return cfg._replace(epsilon=epsilon)


def cancellation_requirements(wire_spacing, g, k):
  """What an attacker needs to null the detector output.

  The injection must reach the two wires half a wavelength apart, and the
  signal-path transfer must beat the coupling transfer by g (k - 1) / k in
  amplitude.

  Returns:
    CancellationReport. phase_only is set when the amplitude ratio is below 1,
    so only the phase condition constrains the attacker.
  """
  if not wire_spacing > 0:
    raise errors.InvalidLength(
        "wire spacing must be positive, got {}".format(wire_spacing))
  if not k > 1:
    raise errors.DegenerateK("k must be > 1, got {}".format(k))
  if not g > 0:
    raise errors.InvalidSpec("g must be positive, got {}".format(g))
  ratio = g * (k - 1.0) / k
  return CancellationReport(
      f_required=coupling.SPEED_OF_LIGHT / (2.0 * wire_spacing),
      power_ratio_required=ratio,
      phase_only=ratio < 1.0)


def drive_vs_control_power_ratio(p_drive, p_control):
  if p_control == 0:
    raise errors.DivideByZero("control power must be nonzero")
  if p_drive < 0 or p_control < 0:
    raise errors.NegativeInput("powers must be >= 0, got {} and {}".format(
        p_drive, p_control))
  return p_drive / p_control

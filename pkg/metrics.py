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

"""Sweep-level metrics for injection experiments.

The following metrics are defined over the rows of a sweep:

(1) True positive rate: the fraction of runs with an attack in which the
  detector fired. Errored runs are left out.
(2) False positive rate: the fraction of runs without an attack in which the
  detector fired.
(3) Impact: the ratio of malicious to legitimate band power in the speaker
  drive signal. Means are taken over linear power ratios and reported in dB,
  so silent malicious bands (-inf dB) still average.
(4) Duty cycle: the fraction of time the motor drive signal is high.
(5) Impact trend: Spearman rank correlation of per-frequency mean impact
  against carrier frequency. Negative values mean impact falls with frequency.
"""

from __future__ import absolute_import
from __future__ import division
from __future__ import print_function

import collections

import numpy as np
from scipy import stats

DetectionRates = collections.namedtuple(
    "DetectionRates", ["tpr", "fpr", "num_attack", "num_no_attack"])

# (1) True positive rate.
TRUE_POSITIVE_RATE = "tpr"
NUM_ATTACK_RUNS = "num_attack_runs"
# (2) False positive rate.
FALSE_POSITIVE_RATE = "fpr"
NUM_NO_ATTACK_RUNS = "num_no_attack_runs"
# (3) Impact.
MEAN_IMPACT_DB = "mean_impact_db"
IMPACT_BASELINE_DB = "impact_baseline_db"
# (4) Duty cycle.
MEAN_DUTY_CYCLE = "mean_duty_cycle"
# (5) Impact trend.
IMPACT_TREND = "impact_trend"
# Detector output statistics.
MEAN_PEAK_V = "mean_peak_v"
MEAN_DC_V = "mean_dc_v"
NUM_ERRORS = "num_errors"

NAN_VAL = "NA"


def _completed(rows):
  return [row for row in rows if row.error is None]


def _rate(rows):
  if not rows:
    return NAN_VAL
  return sum(row.result.outcome.detected for row in rows) / float(len(rows))


def compute_detection_rates(rows):
  """Computes TPR over attack rows and FPR over no-attack rows.

  Args:
    rows: Sweep rows with `attack`, `result` and `error` attributes.

  Returns:
    A DetectionRates object. A rate is NAN_VAL when no completed row of its
    kind exists.
  """
  done = _completed(rows)
  attack = [row for row in done if row.attack]
  no_attack = [row for row in done if not row.attack]
  return DetectionRates(
      tpr=_rate(attack),
      fpr=_rate(no_attack),
      num_attack=len(attack),
      num_no_attack=len(no_attack))


def mean_impact_db(impacts):
  """10 log10 of the mean linear power ratio of dB impacts."""
  if not len(impacts):
    return NAN_VAL
  linear = np.mean(np.power(10.0, np.asarray(impacts, dtype=np.float64) / 10.0))
  if linear == 0:
    return float("-inf")
  return float(10.0 * np.log10(linear))


def _mean_or_nan(values):
  return float(np.mean(values)) if values else NAN_VAL


def _summarize(rows):
  summary = {
      TRUE_POSITIVE_RATE: _rate(rows),
      MEAN_PEAK_V: _mean_or_nan([row.result.outcome.peak for row in rows]),
      MEAN_DC_V: _mean_or_nan([row.result.outcome.dc_offset for row in rows]),
  }
  impacts = [
      row.result.impact_db for row in rows if row.result.impact_db is not None
  ]
  if impacts:
    summary[MEAN_IMPACT_DB] = mean_impact_db(impacts)
  duties = [
      row.result.duty_cycle
      for row in rows
      if row.result.duty_cycle is not None
  ]
  if duties:
    summary[MEAN_DUTY_CYCLE] = _mean_or_nan(duties)
  return summary


def per_frequency_summary(rows):
  """Per-frequency means over completed attack rows.

  Args:
    rows: Sweep rows.

  Returns:
    A list of dicts sorted by frequency. Each holds "f_hz", the TPR and the
    mean peak, DC, and impact or duty cycle of that frequency's runs.
  """
  by_frequency = collections.defaultdict(list)
  for row in _completed(rows):
    if row.attack:
      by_frequency[row.f_hz].append(row)
  summaries = []
  for f_hz in sorted(by_frequency):
    summary = _summarize(by_frequency[f_hz])
    summary["f_hz"] = f_hz
    summaries.append(summary)
  return summaries


def rank_trend(x, y):
  """Spearman rank correlation of y against x; NAN_VAL when undefined."""
  x = np.asarray(x, dtype=np.float64)
  y = np.asarray(y, dtype=np.float64)
  if len(x) < 2 or np.all(x == x[0]) or np.all(y == y[0]):
    return NAN_VAL
  return float(stats.spearmanr(x, y).correlation)


def get_sweep_metrics(rows):
  """Collects the sweep-level metrics into one dict."""
  rates = compute_detection_rates(rows)
  metrics = {
      TRUE_POSITIVE_RATE: rates.tpr,
      FALSE_POSITIVE_RATE: rates.fpr,
      NUM_ATTACK_RUNS: rates.num_attack,
      NUM_NO_ATTACK_RUNS: rates.num_no_attack,
      NUM_ERRORS: len(rows) - len(_completed(rows)),
  }
  baseline = [
      row.result.impact_db
      for row in _completed(rows)
      if not row.attack and row.result.impact_db is not None
  ]
  metrics[IMPACT_BASELINE_DB] = mean_impact_db(baseline)
  summaries = per_frequency_summary(rows)
  impacts = [s[MEAN_IMPACT_DB] for s in summaries if MEAN_IMPACT_DB in s]
  if len(impacts) == len(summaries) and np.all(np.isfinite(impacts)):
    metrics[IMPACT_TREND] = rank_trend([s["f_hz"] for s in summaries],
                                       impacts)
  else:
    metrics[IMPACT_TREND] = NAN_VAL
  return metrics

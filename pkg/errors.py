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

"""Exceptions raised by the emshield library.

Every error is a ValueError so callers that only care about bad input can
catch that; the command line maps the subclasses onto exit codes.
"""

from __future__ import absolute_import
from __future__ import division
from __future__ import print_function


class Error(ValueError):
  """Base class for all emshield errors."""


class AliasingError(Error):
  """A frequency is at or above the Nyquist frequency."""


class InvalidSpec(Error):
  """A signal spec parameter is out of range."""


class DegenerateError(Error):
  """A ratio is undefined because its reference quantity is zero."""


class EmptyWaveform(Error):
  """An analytic was asked of a waveform without samples."""


class InvalidLength(Error):
  """A wire length or spacing is not positive."""


class NegativeInput(Error):
  """A power or coefficient is negative."""


class RateMismatch(Error):
  """Sample rates differ or are too low for the model."""


class LengthMismatch(Error):
  """Two waveforms that must align have different lengths."""


class NoCrossing(Error):
  """A detection curve never crosses the threshold.

  Attributes:
    which: "peak" or "dc", naming the curve that failed to cross.
  """

  def __init__(self, which, message):
    super(NoCrossing, self).__init__(message)
    self.which = which


class EmptyCalibration(Error):
  """Threshold calibration received no noise runs."""


class InvalidThreshold(Error):
  """The comparator threshold is not positive."""


class DegenerateK(Error):
  """The sensitivity ratio K is not greater than one."""


class InvalidRegime(Error):
  """The threshold is at or below the amplified noise level."""


class Infeasible(Error):
  """No detector parameters satisfy the design constraints."""

  def __init__(self, reason):
    super(Infeasible, self).__init__(reason)
    self.reason = reason


class NoPolicy(Error):
  """Adaptive update requested on a detector without an adaptive policy."""


class DivideByZero(Error, ZeroDivisionError):
  """A denominator that must be positive is zero."""


class ConfigError(Error):
  """A configuration field is missing, unknown or invalid.

  Attributes:
    path: Dotted path of the offending field, e.g. "scenario.coupling.k".
  """

  def __init__(self, path, message):
    super(ConfigError, self).__init__("{}: {}".format(path, message))
    self.path = path

"""Pytest wiring for absltest-based tests.

absltest.main() parses absl flags before running tests; under pytest they
are never parsed, so mark them parsed to let absltest helpers (e.g.
create_tempdir, which reads --test_tmpdir) use their defaults.
"""

from absl import flags


def pytest_configure(config):
  del config  # Unused.
  if not flags.FLAGS.is_parsed():
    flags.FLAGS.mark_as_parsed()

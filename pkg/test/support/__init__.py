# Support helpers for repository tests.

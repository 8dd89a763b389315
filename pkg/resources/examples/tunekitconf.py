"""Configuration settings for talking to a tunekit chat service."""

# the base URL of the service started through `tunekit deploy`:
SERVE_URL = "http://127.0.0.1:8000"

# model (or adapter) name requests are addressed to:
MODEL = "base"

# requests timeout in seconds (default=30)
TIMEOUT = 10

# path where to cache responses (either relative to the repository root or an
# absolute path), can be empty which will disable the cache
CACHE_PATH = "tests/cached_responses"

# TESTING ONLY: path to mocked responses (either relative to the repository root or an
# absolute path)
MOCKS_PATH = "tests/mocked_responses"

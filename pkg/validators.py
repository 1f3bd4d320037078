import math
import re

_TRUE = {'1', 'true', 'yes', 'on'}
_FALSE = {'0', 'false', 'no', 'off'}
_KEY = re.compile(r'^[a-z][a-z0-9_]*(\.[a-z][a-z0-9_]*)?$')

class ConfigValidator:
    """Converts raw key=value strings to typed settings."""

    def __init__(self, max_length=500):
        self.max_length = max_length

    def validate_key(self, key):
        if not key or not isinstance(key, str):
            return None, "Key is required"

        key = key.strip().lower()
        if not _KEY.match(key):
            return None, f"Malformed key '{key}' (expected section.key)"
        return key, None

    def validate(self, raw, expected):
        """Return (value, None) converted to the type of `expected`, or (None, error)."""
        if isinstance(raw, str):
            raw = raw.strip()
            if len(raw) > self.max_length:
                return None, f"Value too long (max {self.max_length} characters)"
        elif isinstance(expected, bool) or type(raw) is type(expected):
            if isinstance(raw, type(expected)):
                return raw, None

        if isinstance(expected, bool):
            text = str(raw).lower()
            if text in _TRUE:
                return True, None
            if text in _FALSE:
                return False, None
            return None, f"Expected a boolean, got '{raw}'"

        if isinstance(expected, int):
            try:
                return int(str(raw)), None
            except ValueError:
                return None, f"Expected an integer, got '{raw}'"

        if isinstance(expected, float):
            try:
                value = float(str(raw))
            except ValueError:
                return None, f"Expected a number, got '{raw}'"
            if math.isnan(value):
                return None, "NaN is not a valid setting"
            return value, None

        value = str(raw)
        if '\n' in value or '\t' in value:
            return None, "Value cannot contain tabs or newlines"
        return value, None

    def validate_positive(self, value, name):
        if value is None or value <= 0:
            return None, f"{name} must be positive, got {value}"
        return value, None

    def validate_choice(self, value, choices, name):
        if value not in choices:
            return None, f"{name} must be one of {sorted(choices)}, got '{value}'"
        return value, None

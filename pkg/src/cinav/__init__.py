"""Stop-line aided cooperative inertial navigation.

GNSS/INS error-state filtering, a stop-line position correction for the first
vehicle waiting at a red light, range-based cooperative updates over V2V links
and a deterministic intersection simulator that compares the four methods.
"""

__version__ = "0.1.0"

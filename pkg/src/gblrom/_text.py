"""Shared float-to-text formatting for the plain-text exchange formats.

repr of a Python float is the shortest string that round-trips exactly, which
keeps files byte-stable across runs; numpy scalars must be unwrapped first or
their repr would leak the dtype.
"""


def fnum(x) -> str:
    return repr(float(x))

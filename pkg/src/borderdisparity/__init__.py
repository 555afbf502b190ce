"""Border Disparity Index: how much a city border shifts neighborhood diversity.

Each geounit's neighborhood average of a diversity measure is computed twice,
once over all Queen neighbors and once over neighbors on the same side of the
core-city border; the difference is the unit's border disparity.
"""

__version__ = "0.1.0"

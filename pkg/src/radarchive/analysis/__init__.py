"""Scientific workflows over archive snapshots."""

from .geometry import (
    EARTH_RADIUS_M,
    EFFECTIVE_RADIUS_M,
    GatePointer,
    GeoPoint,
    beam_height,
    great_circle,
    locate_gate,
    slant_range_for_ground,
)
from .kernels import MARSHALL_PALMER, ZrParams, dbz_to_rate, rate_to_dbz
from .products import decode_product, encode_product, products_equal, read_product, write_product
from .workflows import (
    AccumulationGrid,
    QvpProfile,
    TimeSeries,
    accumulate_qpe,
    extract_timeseries,
    qvp,
)

__all__ = [
    "EARTH_RADIUS_M", "EFFECTIVE_RADIUS_M", "GatePointer", "GeoPoint", "beam_height", "great_circle",
    "locate_gate", "slant_range_for_ground", "MARSHALL_PALMER", "ZrParams", "dbz_to_rate", "rate_to_dbz",
    "decode_product", "encode_product", "products_equal", "read_product", "write_product",
    "AccumulationGrid", "QvpProfile", "TimeSeries", "accumulate_qpe", "extract_timeseries", "qvp",
]

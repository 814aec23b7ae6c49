"""Reference evaluation tables frozen as metric oracles."""

BINARY_CLASSES = ("no scrap", "scrap")
SENSOR_CLASSES = ("no failure", "assembly failure", "damage")

# Production-line confusion matrices with their expected metric rows:
# (counts, mcc, accuracy, f1_w, precision_w, recall_w, kappa)
PRODUCTION_CASES = {
    "complete": (
        [[1180766, 2981], [5177, 1702]],
        0.296544, 0.993148, 0.992501, 0.991982, 0.993148, 0.291095,
    ),
    "meta": (
        [[1180558, 3189], [5231, 1648]],
        0.282242, 0.992928, 0.992315, 0.991805, 0.992928, 0.277880,
    ),
    "sub0": (
        [[1175324, 8423], [5221, 1658]],
        0.193483, 0.988540, 0.989614, 0.990776, 0.988540, 0.189955,
    ),
    "sub1": (
        [[1176646, 7101], [5164, 1715]],
        0.215102, 0.989699, 0.990330, 0.991002, 0.989699, 0.213436,
    ),
    "sub2": (
        [[1178458, 5289], [5243, 1636]],
        0.232585, 0.991154, 0.991169, 0.991184, 0.991154, 0.232584,
    ),
    "sub3": (
        [[1177577, 6170], [5432, 1447]],
        0.195008, 0.990256, 0.990502, 0.990755, 0.990256, 0.194752,
    ),
}

# Sensor-group (3-class) confusion matrices.
SENSOR_CASES = {
    "complete": (
        [[1048299, 16513, 12980], [10170, 562431, 9687], [5490, 9841, 553349]],
        0.954285, 0.970979, 0.971026, 0.971148, 0.970979, 0.954239,
    ),
    "meta": (
        [[986600, 38605, 52587], [66409, 461343, 54536], [32209, 48990, 487481]],
        0.792021, 0.868386, 0.868094, 0.868397, 0.868386, 0.791788,
    ),
    "sub0": (
        [[926791, 65712, 85289], [100310, 415950, 66028], [64201, 86228, 418251]],
        0.667663, 0.790122, 0.789722, 0.789413, 0.790122, 0.667620,
    ),
    "sub1": (
        [[986704, 42098, 48990], [87540, 439058, 55690], [65418, 85331, 417931]],
        0.724988, 0.827228, 0.825501, 0.825219, 0.827228, 0.724221,
    ),
    "sub2": (
        [[847699, 108553, 121540], [99505, 393083, 89700], [98541, 135690, 334449]],
        0.539291, 0.706775, 0.707651, 0.709522, 0.706775, 0.538895,
    ),
    "sub3": (
        [[891411, 100951, 85430], [132810, 353791, 95687], [97820, 153418, 317442]],
        0.524877, 0.701127, 0.698990, 0.698634, 0.701127, 0.524224,
    ),
    "sub4": (
        [[637025, 254065, 186702], [231050, 191655, 159583], [218352, 253680, 96648]],
        0.074382, 0.415176, 0.411569, 0.410816, 0.415176, 0.074030,
    ),
    "sub5": (
        [[670710, 198536, 208546], [195684, 148040, 238564], [126985, 203305, 238390]],
        0.181204, 0.474318, 0.478521, 0.485576, 0.474318, 0.180575,
    ),
}



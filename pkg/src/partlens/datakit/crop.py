from __future__ import annotations

from typing import Sequence

import numpy as np

from .dataset import BBox, DatasetError, ImageSample

FILL = (124, 116, 104)


def _strip_free(strip, siblings: Sequence[BBox], h: int, w: int) -> bool:
    x0, y0, x1, y1 = strip
    if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
        return False
    return not any(s.intersects(x0, y0, x1, y1) for s in siblings)


def square_extent(box: BBox, siblings: Sequence[BBox], h: int, w: int):
    """Grow the short side of ``box`` one row/column at a time, alternating
    sides, until square; a side stops growing when the next strip would leave
    the image or touch a sibling box.

    Returns (x0, y0, x1, y1, pad_before, pad_after) where the padding
    applies along the axis that was being extended.
    """
    x0, y0, x1, y1 = box.x_min, box.y_min, box.x_max, box.y_max
    horizontal = box.width < box.height
    deficit = abs(box.width - box.height)
    added = [0, 0]
    open_ = [True, True]
    while deficit and any(open_):
        side = 0 if open_[0] and (added[0] <= added[1] or not open_[1]) else 1
        if horizontal:
            strip = (x0 - 1, y0, x0, y1) if side == 0 else (x1, y0, x1 + 1, y1)
        else:
            strip = (x0, y0 - 1, x1, y0) if side == 0 else (x0, y1, x1, y1 + 1)
        if not _strip_free(strip, siblings, h, w):
            open_[side] = False
            continue
        if horizontal:
            x0, x1 = (x0 - 1, x1) if side == 0 else (x0, x1 + 1)
        else:
            y0, y1 = (y0 - 1, y1) if side == 0 else (y0, y1 + 1)
        added[side] += 1
        deficit -= 1
    before = deficit // 2
    return x0, y0, x1, y1, before, deficit - before


def crop_part(
    image: ImageSample,
    box: BBox,
    siblings: Sequence[BBox] = (),
    label: str | None = None,
    origin_id: str | None = None,
    fill=FILL,
) -> ImageSample:
    """Square crop around ``box``: extend first, pad with ``fill`` last.

    The output side equals max(box width, box height) and the box content
    is copied unchanged.
    """
    px = image.pixels
    h, w = px.shape[:2]
    if not box.inside(h, w):
        raise DatasetError(f"box {box.as_list()} outside {w}x{h} image")
    x0, y0, x1, y1, before, after = square_extent(box, siblings, h, w)
    region = px[y0:y1, x0:x1]
    if before or after:
        side = max(box.width, box.height)
        out = np.empty((side, side, 3), dtype=np.uint8)
        out[...] = np.asarray(fill, dtype=np.uint8)
        if box.width < box.height:
            out[:, before : before + region.shape[1]] = region
        else:
            out[before : before + region.shape[0], :] = region
        region = out
    return ImageSample(
        np.ascontiguousarray(region),
        label if label is not None else image.label,
        "crop",
        origin_id if origin_id is not None else f"{image.origin_id}@{'_'.join(map(str, box.as_list()))}",
    )

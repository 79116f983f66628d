"""Backend selection: compiled core when importable, pure Python otherwise.

``TINYDET_KIT_BACKEND`` forces the choice: ``pure``, ``compiled`` or ``auto``
(default).  Both backends are bit-identical; the compiled one is just fast.
"""

from __future__ import annotations

import os

_requested = os.environ.get("TINYDET_KIT_BACKEND", "auto").lower()

if _requested == "pure":
    from . import _pure as impl
elif _requested == "compiled":
    from . import _core as impl  # ImportError here means the extension is absent
else:
    try:
        from . import _core as impl
    except ImportError:
        from . import _pure as impl

conv2d_raw = impl.conv2d_raw
avgpool2_raw = impl.avgpool2_raw
BACKEND_NAME = impl.BACKEND_NAME

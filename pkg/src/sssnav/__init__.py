"""Landmark-aided navigation from side-scan sonar detections."""

import logging
import os

__version__ = "0.1.0"

_level = os.environ.get("SSSNAV_LOG")
if _level:
    logging.basicConfig(level=_level.upper(), format="%(levelname)s %(name)s: %(message)s")

"""
Qt Compatibility Layer
Supports both PySide6 and PySide2

Only QtCore is needed: QSettings backs every configuration, policy and
model dump file of the toolkit. No GUI module is imported, so the layer
works on headless machines.
"""
import logging

logger = logging.getLogger(__name__)

QT_VERSION = None
QtCore = None

try:
    from PySide6 import QtCore
    QT_VERSION = 6
except ImportError:
    try:
        from PySide2 import QtCore
        QT_VERSION = 2
    except ImportError:
        raise ImportError("No Qt bindings found. Install PySide6-Essentials (or PySide2).")

logger.debug("Using PySide%d QtCore bindings", QT_VERSION)

QSettings = QtCore.QSettings

# Scoped enum access (Qt 6) with the flat Qt 5 spelling as fallback
_Format = getattr(QSettings, "Format", QSettings)
_Status = getattr(QSettings, "Status", QSettings)
INI_FORMAT = _Format.IniFormat
STATUS_OK = _Status.NoError
STATUS_FORMAT_ERROR = _Status.FormatError

__all__ = ["QtCore", "QSettings", "QT_VERSION", "INI_FORMAT", "STATUS_OK",
           "STATUS_FORMAT_ERROR", "ini_settings"]


def ini_settings(path):
    """Open an INI file through QSettings"""
    return QSettings(str(path), INI_FORMAT)

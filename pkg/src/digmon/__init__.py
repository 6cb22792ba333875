"""Desk-scale simulation of an out-of-band, high-resolution node power monitor.

Subpackages cover the signal chain (``scenario``, ``frontend``, ``adc``,
``calib``, ``metrology``), spectral analytics (``spectral``), the pub/sub
fabric (``transport``), the edge ``agent`` and the ``collector`` store.
"""

__version__ = "0.1.0"

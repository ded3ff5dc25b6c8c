"""Water-stress detection from plant electrophysiology (EDP) recordings.

The package covers the whole feature-based track: ingestion and windowing,
statistical features, MI + backward selection, histogram gradient boosting,
temperature scaling, and temporal transition / precision-recall analytics.
"""

__version__ = "0.1.0"

GENERATOR_VERSION = f"phytosense/{__version__}"

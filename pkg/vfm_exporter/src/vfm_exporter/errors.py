"""Exporter error hierarchy; callers can catch the base to get everything."""


class ExporterError(Exception):
    pass


class ParameterError(ExporterError):
    """An argument or spec field is out of range or inconsistent."""


class MissingFramesError(ExporterError):
    """Requested frame files do not exist; the message lists every gap."""

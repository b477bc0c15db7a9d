"""Exception taxonomy for the exporter.

ConfigError for bad settings, FormatError for malformed files we write or
read, ValidationError for inputs that parse but violate a contract, and
IngestError for image files that cannot be decoded.
"""


class ExtractorError(Exception):
    pass


class ConfigError(ExtractorError):
    pass


class FormatError(ExtractorError):
    pass


class ValidationError(ExtractorError):
    pass


class IngestError(ExtractorError):
    pass

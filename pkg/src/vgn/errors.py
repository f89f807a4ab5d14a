class FormatError(ValueError):
    """A serialized artifact could not be parsed.

    ``offset`` is the line number (text formats) or byte offset (binary
    formats) at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset

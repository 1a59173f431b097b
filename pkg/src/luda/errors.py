"""Exception hierarchy for the store, file formats, and the device layer."""


class LudaError(Exception):
    """Base class for all store errors."""


class FormatError(LudaError):
    """Malformed or truncated on-disk structure."""


class CorruptionError(FormatError):
    """Checksum mismatch or otherwise damaged data.

    ``offset`` locates the damaged block within its file when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (block offset {offset})"
        super().__init__(message)
        self.offset = offset


class OrderingError(LudaError):
    """Input keys violate the required sort order."""


class SizeOverflowError(LudaError):
    """Payload exceeds a configured size limit; the caller must split."""


class StoreClosedError(LudaError):
    """Operation on a closed store."""


class WriteStalled(LudaError):
    """Level-0 backlog exceeded the stall threshold and did not drain."""


class DeviceError(LudaError):
    """Failure inside the offload device backend."""


class CapacityError(DeviceError):
    """Device region allocation exceeded the configured capacity."""

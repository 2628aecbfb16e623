class ImgAuditError(Exception):
    """Base class for input errors the CLI reports with exit status 3."""


class ImageError(ImgAuditError):
    pass


class GptError(ImgAuditError):
    pass


class ExtError(ImgAuditError):
    pass


class PathNotFound(ExtError):
    pass


class CredentialParseError(ImgAuditError, ValueError):
    pass


class PolicyError(ImgAuditError, ValueError):
    pass


class BannerError(ImgAuditError, ValueError):
    pass

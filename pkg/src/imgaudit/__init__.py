"""Offline forensic comparison of disk images: GPT layout, ext2 trees,
credential files and kernel build banners."""

__version__ = "0.1.0"

from .errors import (BannerError, CredentialParseError, ExtError, GptError,  # noqa: E402
                     ImageError, ImgAuditError, PathNotFound, PolicyError)

__all__ = ["__version__", "ImgAuditError", "ImageError", "GptError", "ExtError",
           "PathNotFound", "CredentialParseError", "PolicyError", "BannerError"]

class HGMError(ValueError):
    """Error carrying a short machine-readable code, e.g. ``"dim-mismatch"``."""

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}" if detail else code)

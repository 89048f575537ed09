class IntRange:
    def __init__(self, min=None, max=None):
        self.min = min
        self.max = max

    def convert(self, value):
        value = int(value)
        if self.min is not None and value < self.min:
            raise ValueError(f"{value} is smaller than the minimum {self.min}")
        if self.max is not None and value > self.max:
            raise ValueError(f"{value} is larger than the maximum {self.max}")
        return value


class Choice:
    def __init__(self, choices, case_sensitive=True):
        self.choices = list(choices)
        self.case_sensitive = case_sensitive

    def convert(self, value):
        pool = self.choices if self.case_sensitive else [c.lower() for c in self.choices]
        probe = value if self.case_sensitive else value.lower()
        if probe not in pool:
            raise ValueError(f"{value!r} is not one of {self.choices}")
        return self.choices[pool.index(probe)]

# Models module initialization
__all__ = [
    'data_classes'
]
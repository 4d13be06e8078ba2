from .preprocessor import ShapePreprocessor

__all__ = ["ShapePreprocessor"]

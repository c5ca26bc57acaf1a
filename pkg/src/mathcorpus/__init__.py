"""mathcorpus: Wikipedia math-expression corpus, recurrent math language
model, and MLM-guided symbolic regression."""

__version__ = "0.1.0"

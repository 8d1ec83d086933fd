# densitybench - 密度予測の較正・評価ツールキット

__version__ = "0.1.0"

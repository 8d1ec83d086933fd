# densitybench - Utils Package
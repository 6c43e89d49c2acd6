# 潜变量响应分析包
# 包含神经网络核心、VAE、数据集、响应分析、响应图、插值与命令行入口

# 应用包初始化文件

__version__ = "0.1.0"

# 核心功能模块包初始化文件
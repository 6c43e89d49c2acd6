# API v1版本包初始化文件
# gridscope test package

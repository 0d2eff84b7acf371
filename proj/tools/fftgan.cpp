#include <cstdio>
int main() { std::puts("fftgan placeholder"); return 0; }

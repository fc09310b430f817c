#include <cstdio>

int main() {
    std::puts("blmrob: subcommands not wired yet");
    return 0;
}

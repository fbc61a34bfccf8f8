#include <stdio.h>

static __thread int counter;
__thread long total = 5;

__attribute__((noinline)) void bump(int by) {
    counter += by;
    total += counter;
}

int main(int argc, char **argv) {
    (void)argv;
    for (int i = 0; i < argc + 3; i++)
        bump(i);
    printf("%d %ld\n", counter, total);
    return 0;
}

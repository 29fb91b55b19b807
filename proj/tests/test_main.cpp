#define DOCTEST_CONFIG_IMPLEMENT
#include "doctest.h"

#include "medt/common.hpp"

int main(int argc, char** argv)
{
    medt::tune_allocator();
    doctest::Context ctx(argc, argv);
    return ctx.run();
}

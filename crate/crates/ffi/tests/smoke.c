#include <stdio.h>
#include <string.h>
#include "ignet.h"

int main(int argc, char **argv) {
    if (argc < 2) return 10;
    IgnetModel *m = NULL;
    if (ignet_model_new("se-ign2", 3, 8, 1, &m) != IGNET_STATUS_OK) return 11;
    size_t shape[3];
    if (ignet_model_input_shape(m, shape) != IGNET_STATUS_OK || shape[1] != 8) return 12;
    double x[2 * 3 * 8 * 8];
    for (size_t i = 0; i < sizeof x / sizeof x[0]; i++) x[i] = (double)(i % 7) / 7.0;
    double y[6], z[6];
    if (ignet_model_forward(m, x, 2, 2 * 3 * 8 * 8, y, 6) != IGNET_STATUS_OK) return 13;
    if (ignet_model_save(m, argv[1]) != IGNET_STATUS_OK) return 14;
    IgnetModel *back = NULL;
    if (ignet_model_load(argv[1], &back) != IGNET_STATUS_OK) return 15;
    if (ignet_model_forward(back, x, 2, 2 * 3 * 8 * 8, z, 6) != IGNET_STATUS_OK) return 16;
    if (memcmp(y, z, sizeof y) != 0) return 17;
    if (ignet_model_forward(back, x, 2, 5, z, 6) != IGNET_STATUS_SHAPE) return 18;
    if (ignet_last_error() == NULL) return 19;
    ignet_model_free(m);
    ignet_model_free(back);
    printf("ok %s\n", ignet_version());
    return 0;
}

#include <stdio.h>
#include <stdlib.h>
#include "attenlab.h"

/* usage: smoke <checkpoint>; prints "lo hi auc classes p0+..+pk" */
int main(int argc, char **argv) {
    if (argc != 2) return 64;
    double lo, hi, a;
    if (attenlab_clopper_pearson(46, 59, 0.95, &lo, &hi) != ATTENLAB_STATUS_OK) return 1;
    double scores[4] = {0.9, 0.8, 0.3, 0.1};
    uint8_t labels[4] = {1, 0, 1, 0};
    if (attenlab_auc(scores, labels, 4, &a) != ATTENLAB_STATUS_OK) return 2;

    AttenlabModel *m = NULL;
    if (attenlab_model_load(argv[1], &m) != ATTENLAB_STATUS_OK) {
        fprintf(stderr, "%s\n", attenlab_last_error());
        return 3;
    }
    size_t k = 0, side = 0;
    attenlab_model_classes(m, &k);
    attenlab_model_input_size(m, &side);
    uint8_t *rgb = malloc(side * side * 3);
    for (size_t i = 0; i < side * side * 3; i++) rgb[i] = (uint8_t)(i * 7);
    double probs[16];
    if (attenlab_model_predict_rgb(m, rgb, side, side, probs, k) != ATTENLAB_STATUS_OK) return 4;
    double total = 0;
    for (size_t i = 0; i < k; i++) total += probs[i];
    if (attenlab_model_predict_rgb(m, rgb, side, side, probs, k + 1) != ATTENLAB_STATUS_DIMENSION) return 5;
    free(rgb);
    attenlab_model_free(m);
    printf("%.4f %.4f %.4f %zu %.6f\n", lo, hi, a, k, total);
    return 0;
}

#include <stdio.h>
#include <stdlib.h>
#include "unitr.h"

int main(void) {
    const char *cfg =
        "{\"rig\":{\"views\":2,\"image_size\":[32,64],\"focal\":null,\"principal\":null,"
        "\"height\":0.2,\"radius\":0.7,\"pitch_deg\":5.0,\"explicit_views\":null},"
        "\"tokenizer\":{\"grid_size\":[0.3,0.3,8.0],\"range_min\":[-6.0,-6.0,-5.0],"
        "\"range_max\":[6.0,6.0,3.0],\"patch_size\":8,\"extra_feature_dim\":1,\"channels\":32},"
        "\"partition\":{\"tau\":16,\"lidar_window\":[30,30,1],\"image_window\":[30,30,1]},"
        "\"attention\":{\"heads\":4,\"hidden_channels\":64},"
        "\"blocks\":{\"sequence\":[\"intra\",\"inter2d\",\"inter2d\",\"inter3d\"],"
        "\"layers_per_block\":2,\"pseudo_grid_shape\":[40,40,4],\"offset_in_pixels\":false},"
        "\"run\":{\"points\":400,\"boxes\":2}}";
    UnitrEngine *engine = NULL;
    UnitrStatus st = unitr_engine_create(cfg, 5, &engine);
    if (st != UNITR_STATUS_OK) {
        fprintf(stderr, "create failed: %s\n", unitr_last_error_message());
        return 1;
    }
    size_t x, y, c;
    unitr_engine_bev_dims(engine, &x, &y, &c);
    printf("bev dims: %zu x %zu x %zu\n", x, y, c);
    float *features = malloc(x * y * c * sizeof(float));
    uint64_t dispatches = 0;
    st = unitr_engine_run(engine, 7, false, features, x * y * c, &dispatches);
    if (st != UNITR_STATUS_OK) {
        fprintf(stderr, "run failed: %s\n", unitr_last_error_message());
        return 1;
    }
    double sum = 0;
    for (size_t i = 0; i < x * y * c; i++) sum += features[i];
    printf("dispatches: %llu, feature sum: %f\n", (unsigned long long)dispatches, sum);
    free(features);
    unitr_engine_destroy(engine);
    printf("ffi smoke ok\n");
    return 0;
}

#include <stdio.h>
#include <string.h>

#include "last.h"

int main(void) {
    LastSideNetwork *side = NULL;
    size_t params = 0;
    const char *cfg = "{\"backbone\": {\"depth\": 12, \"width\": 768, \"heads\": 12, \"patch_size\": 16, "
                      "\"image_size\": 224}, \"side\": {\"num_classes\": 100}, \"data\": {\"num_classes\": 100}}";
    if (last_side_init(cfg, 0, &side) != LAST_STATUS_OK) {
        fprintf(stderr, "init: %s\n", last_error_message());
        return 1;
    }
    if (last_side_param_count(side, false, &params) != LAST_STATUS_OK || params != 618048) {
        fprintf(stderr, "params %zu\n", params);
        return 1;
    }
    last_side_free(side);

    LastBackbone *bb = NULL;
    if (last_backbone_load("/nonexistent/w.lastw", &bb) != LAST_STATUS_IO || bb != NULL) {
        return 1;
    }
    if (strstr(last_error_message(), "/nonexistent/w.lastw") == NULL) {
        return 1;
    }
    printf("ok %s\n", last_version());
    return 0;
}

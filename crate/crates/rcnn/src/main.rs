fn main() {
    std::process::exit(rcnn::cli::run());
}

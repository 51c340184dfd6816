pub mod attacks;
pub mod codec;
pub mod ids;
pub mod mac;
pub mod nodes;
pub mod radio;
pub mod sim;
